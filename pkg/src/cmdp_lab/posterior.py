from __future__ import annotations

import logging
from pathlib import Path
from typing import Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import softmax

from .cmdp import FloatArray

logger = logging.getLogger(__name__)

IntArray = NDArray[np.int64]
Seed = Union[int, np.random.Generator, None]

DEFAULT_PRIOR_ALPHA = 0.01


def as_generator(seed: Seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class DirichletPosterior:
    """
    Independent Dirichlet posteriors over p(.|s,a), one per state-action pair.

    The parameter tensor is always prior_alpha + counts; updates only touch the
    integer count tensor so the conjugacy bookkeeping stays exact. A posterior is
    owned by a single run and mutated in place.
    """

    def __init__(self, n_states: int, n_actions: int, prior_alpha: ArrayLike = DEFAULT_PRIOR_ALPHA) -> None:
        shape = (n_states, n_actions, n_states)
        prior = np.array(np.broadcast_to(np.asarray(prior_alpha, dtype=np.float64), shape))
        if not np.all(np.isfinite(prior)) or np.any(prior <= 0):
            raise ValueError("prior parameters must be finite and strictly positive")
        prior.setflags(write=False)
        self._prior = prior
        self._counts: IntArray = np.zeros(shape, dtype=np.int64)
        self._visits: IntArray = np.zeros(shape[:2], dtype=np.int64)

    @property
    def n_states(self) -> int:
        return self._prior.shape[0]

    @property
    def n_actions(self) -> int:
        return self._prior.shape[1]

    @property
    def prior_alpha(self) -> FloatArray:
        return self._prior

    @property
    def counts(self) -> IntArray:
        """N_t(s,a,s'), read-only view."""
        view = self._counts.view()
        view.setflags(write=False)
        return view

    @property
    def visits(self) -> IntArray:
        """N_t(s,a) = sum_s' N_t(s,a,s'), read-only view."""
        view = self._visits.view()
        view.setflags(write=False)
        return view

    @property
    def alpha(self) -> FloatArray:
        return self._prior + self._counts

    def update(self, s: int, a: int, s_next: int) -> "DirichletPosterior":
        S, A = self.n_states, self.n_actions
        if not (0 <= s < S and 0 <= a < A and 0 <= s_next < S):
            raise IndexError(f"transition ({s}, {a}, {s_next}) outside a {S}x{A} model")
        self._counts[s, a, s_next] += 1
        self._visits[s, a] += 1
        return self

    def update_counts(self, counts: ArrayLike) -> "DirichletPosterior":
        """Batched conjugate update with a tensor of transition counts."""
        batch = np.asarray(counts)
        if batch.shape != self._counts.shape:
            raise ValueError(f"count tensor must have shape {self._counts.shape}, got {batch.shape}")
        if not np.issubdtype(batch.dtype, np.integer) or np.any(batch < 0):
            raise ValueError("counts must be nonnegative integers")
        self._counts += batch.astype(np.int64)
        self._visits += batch.sum(axis=2).astype(np.int64)
        return self

    def sample_kernel(self, rng: Seed = None) -> FloatArray:
        """
        Draw every row p(.|s,a) from Dirichlet(alpha(s,a,.)).

        Sampled in log space (Gamma(a) = Gamma(a + 1) * U^(1/a)) so rows with tiny
        parameters do not underflow to all-zero.
        """
        gen = as_generator(rng)
        alpha = self.alpha
        log_gamma = np.log(gen.standard_gamma(alpha + 1.0)) + np.log1p(-gen.random(alpha.shape)) / alpha
        return softmax(log_gamma, axis=2)

    def empirical_kernel(self) -> FloatArray:
        """N(s,a,s') / N(s,a); unvisited pairs get the uniform row."""
        visits = self._visits[:, :, None]
        uniform = np.full(self._counts.shape, 1.0 / self.n_states)
        return np.where(visits > 0, self._counts / np.maximum(visits, 1), uniform)

    def copy(self) -> "DirichletPosterior":
        clone = DirichletPosterior(self.n_states, self.n_actions, self._prior)
        clone._counts = self._counts.copy()
        clone._visits = self._visits.copy()
        return clone

    def save_snapshot(self, path: str | Path) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("wb") as fh:
            np.savez_compressed(fh, prior_alpha=self._prior, counts=self._counts)
        logger.debug("posterior snapshot written to %s", out)
        return out

    @classmethod
    def load_snapshot(cls, path: str | Path) -> "DirichletPosterior":
        with np.load(Path(path)) as data:
            prior = data["prior_alpha"]
            counts = data["counts"]
        post = cls(prior.shape[0], prior.shape[1], prior)
        return post.update_counts(counts)
