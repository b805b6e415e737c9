"""Probability-simplex helpers: validation, normalization maps and elementary functionals.

Vectors and matrices are plain float64 numpy arrays. The ``as_*`` validators
return read-only copies so validated values can be shared freely.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateLatent, DomainError, ShapeError

SIMPLEX_ATOL = 1e-12
COUPLING_ATOL = 1e-8


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def as_positive(x, ndim):
    """Validate an unnormalized latent block (entries >= 0, not all zero)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim}-d array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("latent entries must be finite")
    if np.any(x < 0):
        raise DomainError("latent entries must be nonnegative")
    if not np.any(x > 0):
        raise DegenerateLatent("all entries are zero; normalization is undefined")
    return x


def _as_prob(x, ndim, atol):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim}-d array, got shape {x.shape}")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise DomainError("probability entries must be finite and nonnegative")
    total = x.sum()
    if abs(total - 1.0) > atol:
        raise DomainError(f"entries sum to {total!r}, expected 1")
    return _frozen(x)


def as_prob_vector(x, atol=SIMPLEX_ATOL):
    """Return ``x`` as a read-only point of the probability simplex P_n."""
    return _as_prob(x, 1, atol)


def as_prob_matrix(x, atol=SIMPLEX_ATOL):
    """Return ``x`` as a read-only point of P_{n x n}."""
    x = _as_prob(x, 2, atol)
    if x.shape[0] != x.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {x.shape}")
    return x


def normalize_vector(u):
    """Map a nonnegative vector onto the simplex by dividing by its sum."""
    u = as_positive(u, 1)
    return _frozen(u / u.sum())


def normalize_matrix(w):
    """Map a nonnegative matrix onto P_{n x n} by dividing by its total mass."""
    w = as_positive(w, 2)
    return _frozen(w / w.sum())


def frobenius_inner(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def _xlogx_terms(t):
    # 0 log 0 := 0
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = t[pos] * np.log(t[pos])
    return out


def entropy(t):
    """Discrete entropy ``-sum T_ij (log T_ij - 1)`` with ``0 log 0 = 0``."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise DomainError("entropy is defined for nonnegative matrices only")
    return float(-np.sum(_xlogx_terms(t)) + t.sum())


def kl_divergence(t, k):
    """Generalized Kullback-Leibler divergence ``sum T log(T/K) - T + K``."""
    t = np.asarray(t, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if t.shape != k.shape:
        raise ShapeError(f"shape mismatch: {t.shape} vs {k.shape}")
    if np.any(t < 0) or np.any(k < 0):
        raise DomainError("KL divergence needs nonnegative arguments")
    if np.any((k == 0) & (t > 0)):
        raise DomainError("K has a zero where T has mass")
    pos = t > 0
    log_ratio = np.zeros_like(t)
    log_ratio[pos] = np.log(t[pos]) - np.log(k[pos])
    return float(np.sum(t * log_ratio) - t.sum() + k.sum())


@dataclass(frozen=True)
class Coupling:
    """A transport plan together with the marginals it satisfies."""

    plan: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    atol: float = field(default=COUPLING_ATOL, compare=False, repr=False)

    def __post_init__(self):
        atol = self.atol
        plan = np.asarray(self.plan, dtype=np.float64)
        p = np.asarray(self.row_marginal, dtype=np.float64)
        q = np.asarray(self.col_marginal, dtype=np.float64)
        if plan.ndim != 2 or plan.shape != (p.size, q.size):
            raise ShapeError(f"plan shape {plan.shape} does not match marginals ({p.size}, {q.size})")
        if np.any(plan < 0):
            raise DomainError("coupling entries must be nonnegative")
        if abs(plan.sum() - 1.0) > atol:
            raise DomainError(f"coupling mass {plan.sum()!r} differs from 1")
        if np.max(np.abs(plan.sum(axis=1) - p)) > atol:
            raise DomainError("row sums do not match the row marginal")
        if np.max(np.abs(plan.sum(axis=0) - q)) > atol:
            raise DomainError("column sums do not match the column marginal")
        object.__setattr__(self, "plan", _frozen(plan))
        object.__setattr__(self, "row_marginal", _frozen(p))
        object.__setattr__(self, "col_marginal", _frozen(q))

    @property
    def n(self):
        return self.plan.shape[0]
