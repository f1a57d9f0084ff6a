"""Dense symmetric-positive-definite kernel.

``SpdMatrix`` keeps three views of the same matrix: the entries, a lower
Cholesky factor (authoritative for solves) and an explicit inverse used for
fast batched quadratic forms inside policy loops. Rank-one updates maintain
the factor by a Cholesky up-date and the inverse by Sherman-Morrison; every
``refresh_every`` updates both are rebuilt from the entries to bound drift.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .exceptions import DimensionMismatch, NotPositiveDefinite

MAX_DIM = 512
DEFAULT_REFRESH_EVERY = 256
_SYMMETRY_RTOL = 1e-12


def cholesky(m) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == m``.

    Raises NotPositiveDefinite when ``m`` is not symmetric or a pivot is
    not strictly positive.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise DimensionMismatch(f"expected a non-empty square matrix, got shape {m.shape}")
    scale = max(np.abs(m).max(), 1.0)
    if np.abs(m - m.T).max() > _SYMMETRY_RTOL * scale:
        raise NotPositiveDefinite("matrix is not symmetric")
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(
            "non-positive pivot in Cholesky factorization (ridge too small or corrupted state)"
        ) from exc
    if not np.all(np.diag(chol) > 0):
        raise NotPositiveDefinite("non-positive pivot in Cholesky factorization")
    return chol


def _chol_rank1_update(chol: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Factor of ``L L^T + e e^T`` from ``L`` in O(d^2)."""
    chol = chol.copy()
    x = e.copy()
    n = chol.shape[0]
    for k in range(n):
        lkk = chol[k, k]
        r = np.hypot(lkk, x[k])
        c = r / lkk
        s = x[k] / lkk
        chol[k, k] = r
        if k + 1 < n:
            chol[k + 1:, k] = (chol[k + 1:, k] + s * x[k + 1:]) / c
            x[k + 1:] = c * x[k + 1:] - s * chol[k + 1:, k]
    return chol


class SpdMatrix:
    """Immutable SPD matrix with cached Cholesky factor and inverse."""

    __slots__ = ("entries", "chol", "inv", "refresh_every", "updates_since_refresh")

    def __init__(self, entries, chol=None, inv=None, refresh_every=DEFAULT_REFRESH_EVERY,
                 updates_since_refresh=0):
        entries = np.array(entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise DimensionMismatch(f"expected a square matrix, got shape {entries.shape}")
        if entries.shape[0] > MAX_DIM:
            raise DimensionMismatch(f"dense kernel capped at d <= {MAX_DIM}")
        if refresh_every < 1:
            raise ValueError("refresh_every must be >= 1")
        if chol is None:
            chol = cholesky(entries)
        if inv is None:
            inv = _inverse_from_chol(chol)
        self.entries = entries
        self.chol = chol
        self.inv = inv
        self.refresh_every = int(refresh_every)
        self.updates_since_refresh = int(updates_since_refresh)
        for arr in (self.entries, self.chol, self.inv):
            arr.setflags(write=False)

    @classmethod
    def scaled_identity(cls, dim: int, scale: float = 1.0, refresh_every=DEFAULT_REFRESH_EVERY):
        if dim < 1:
            raise DimensionMismatch("dim must be >= 1")
        if scale <= 0:
            raise NotPositiveDefinite("identity scale must be positive")
        eye = np.eye(dim)
        return cls(scale * eye, chol=np.sqrt(scale) * eye, inv=eye / scale,
                   refresh_every=refresh_every)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def refreshed(self) -> "SpdMatrix":
        """Same matrix with the factor and inverse recomputed from the entries."""
        return SpdMatrix(self.entries, refresh_every=self.refresh_every)

    def __repr__(self):
        return f"SpdMatrix(dim={self.dim}, updates_since_refresh={self.updates_since_refresh})"


def _inverse_from_chol(chol: np.ndarray) -> np.ndarray:
    inv = cho_solve((chol, True), np.eye(chol.shape[0]))
    return 0.5 * (inv + inv.T)


def _check_vector(m: SpdMatrix, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 0 or v.shape[0] != m.dim:
        raise DimensionMismatch(f"vector of length {v.shape[:1]} against matrix of dim {m.dim}")
    return v


def quad_form_inv(m: SpdMatrix, v) -> float:
    """``v^T m^{-1} v`` through a triangular solve on the Cholesky factor."""
    v = _check_vector(m, v)
    if v.ndim != 1:
        raise DimensionMismatch("quad_form_inv takes a single vector; use quad_forms for batches")
    y = solve_triangular(m.chol, v, lower=True, check_finite=False)
    return float(y @ y)


def quad_forms(m: SpdMatrix, vectors) -> np.ndarray:
    """Batched ``v^T m^{-1} v`` over the last axis, using the cached inverse."""
    vectors = np.asarray(vectors, dtype=float)
    if vectors.shape[-1] != m.dim:
        raise DimensionMismatch(f"trailing axis {vectors.shape[-1]} != dim {m.dim}")
    q = np.einsum("...i,ij,...j->...", vectors, m.inv, vectors)
    return np.maximum(q, 0.0)


def solve_spd(m: SpdMatrix, v) -> np.ndarray:
    """Solve ``m x = v`` (``v`` may be a vector or a matrix of columns)."""
    v = _check_vector(m, v)
    return cho_solve((m.chol, True), v, check_finite=False)


def rank1_update(m: SpdMatrix, e) -> SpdMatrix:
    """Return ``m + e e^T`` with factor and inverse carried along."""
    e = _check_vector(m, e)
    if e.ndim != 1:
        raise DimensionMismatch("rank1_update takes a single vector")
    if not np.any(e):
        return m
    entries = m.entries + np.outer(e, e)
    count = m.updates_since_refresh + 1
    if count >= m.refresh_every:
        return SpdMatrix(entries, refresh_every=m.refresh_every)
    chol = _chol_rank1_update(m.chol, e)
    ie = m.inv @ e
    inv = m.inv - np.outer(ie, ie) / (1.0 + e @ ie)
    return SpdMatrix(entries, chol=chol, inv=inv, refresh_every=m.refresh_every,
                     updates_since_refresh=count)
