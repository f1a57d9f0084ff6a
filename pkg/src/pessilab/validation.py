"""Input validation helpers shared by the estimators and functional kernels."""
import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DimensionMismatch


def check_embeddings(X, dim=None, name="X", allow_nd=False):
    """Finite float array of embeddings with a trailing feature axis of size ``dim``."""
    X = check_array(X, dtype=np.float64, ensure_2d=not allow_nd, allow_nd=allow_nd,
                    input_name=name)
    if dim is not None and X.shape[-1] != dim:
        raise DimensionMismatch(f"{name} has {X.shape[-1]} features, expected {dim}")
    return X


def check_vector(v, dim=None, name="v"):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatch(f"{name} must be one-dimensional, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise DimensionMismatch(f"{name} has length {v.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    return v


def check_pairs(X, dim=None):
    """Preference pairs as an array of shape (n, 2, d): [:, 0] chosen, [:, 1] rejected."""
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_2d=False, input_name="X")
    if X.ndim != 3 or X.shape[1] != 2:
        raise DimensionMismatch(f"pairs must have shape (n, 2, d), got {X.shape}")
    if dim is not None and X.shape[2] != dim:
        raise DimensionMismatch(f"pairs have {X.shape[2]} features, expected {dim}")
    return X


def check_query(e, dim):
    """Single vector or batch (..., d) as a float array."""
    e = np.asarray(e, dtype=np.float64)
    if e.ndim == 0 or e.shape[-1] != dim:
        raise DimensionMismatch(f"expected trailing dimension {dim}, got shape {e.shape}")
    return e
