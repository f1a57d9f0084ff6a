"""Reward uncertainty from last-layer embeddings.

Two estimators live here: the confidence-ellipsoid width ``sqrt(e^T M^{-1} e)``
with ``M = lam * I + sum of e e^T`` over every chosen and rejected training
embedding, and a Gaussian-process posterior (RBF or linear kernel) fitted on a
random subset of training embeddings. A small report helper correlates either
uncertainty with the observed proxy error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DegenerateInput, DimensionMismatch, InvalidConfig, NotPositiveDefinite
from .linalg import DEFAULT_REFRESH_EVERY, SpdMatrix, cholesky, quad_form_inv, quad_forms, rank1_update
from .synthworld import PreferenceDataset, SyntheticWorld
from .validation import check_embeddings, check_query

KERNELS = ("rbf", "linear")


@dataclass(frozen=True)
class PrecisionState:
    m: SpdMatrix
    lambda_ridge: float
    n_embeddings: int

    @property
    def dim(self) -> int:
        return self.m.dim


@dataclass(frozen=True)
class RobustnessConfig:
    B: float = 5.0
    delta: float | None = None  # informational only

    def __post_init__(self):
        if not self.B > 0:
            raise InvalidConfig("B must be positive")


def precision_from_embeddings(embeddings, lambda_ridge: float = 1.0, dim: int | None = None,
                              refresh_every: int = DEFAULT_REFRESH_EVERY) -> PrecisionState:
    """Accumulate ``lam * I + sum e e^T`` by rank-one updates in row order."""
    if not lambda_ridge > 0:
        raise InvalidConfig("lambda_ridge must be positive")
    embeddings = np.asarray(embeddings, dtype=float)
    if dim is None:
        if embeddings.ndim != 2:
            raise DimensionMismatch("cannot infer the dimension from an empty embedding set")
        dim = embeddings.shape[1]
    embeddings = embeddings.reshape(-1, dim)
    m = SpdMatrix.scaled_identity(dim, lambda_ridge, refresh_every=refresh_every)
    for e in embeddings:
        m = rank1_update(m, e)
    return PrecisionState(m, float(lambda_ridge), len(embeddings))


def build_precision(data: PreferenceDataset, world: SyntheticWorld, lambda_ridge: float = 1.0,
                    refresh_every: int = DEFAULT_REFRESH_EVERY) -> PrecisionState:
    """Precision of the preference data: both sides of every pair, in dataset order."""
    data.validate_against(world)
    pairs = np.stack([data.chosen_embeddings(world), data.rejected_embeddings(world)], axis=1)
    return precision_from_embeddings(pairs.reshape(-1, world.dim), lambda_ridge, world.dim,
                                     refresh_every)


def ci_uncertainty(prec: PrecisionState, e):
    """Unscaled confidence width ``sqrt(e^T M^{-1} e)``; batches over leading axes."""
    e = check_query(e, prec.dim)
    if e.ndim == 1:
        return float(np.sqrt(quad_form_inv(prec.m, e)))
    return np.sqrt(quad_forms(prec.m, e))


# --- Gaussian process ----------------------------------------------------

def kernel_matrix(A, B, kernel: str = "rbf", length_scale: float = 1.0) -> np.ndarray:
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if kernel == "linear":
        return A @ B.T
    if kernel == "rbf":
        sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
        return np.exp(-np.maximum(sq, 0.0) / (2.0 * length_scale**2))
    raise InvalidConfig(f"unknown kernel {kernel!r}; expected one of {KERNELS}")


@dataclass(frozen=True)
class GpPosterior:
    kernel: str
    length_scale: float
    train_embeddings: np.ndarray
    train_targets: np.ndarray
    sigma_n: float
    chol_K: np.ndarray
    alpha: np.ndarray  # (K + sigma_n^2 I)^{-1} r

    @property
    def dim(self) -> int:
        return self.train_embeddings.shape[1]


def gp_fit(embeddings, targets, kernel: str = "rbf", sigma_n: float = 0.1, subset_size: int = 512,
           seed: int = 0, length_scale: float = 1.0) -> GpPosterior:
    """GP posterior on a uniform random subset (without replacement) of the samples."""
    X = check_embeddings(embeddings, name="embeddings")
    y = np.asarray(targets, dtype=float).ravel()
    if len(X) == 0 or len(X) != len(y):
        raise InvalidConfig("need a nonempty set of (embedding, target) samples")
    if not sigma_n > 0:
        raise InvalidConfig("sigma_n must be positive")
    if kernel not in KERNELS:
        raise InvalidConfig(f"unknown kernel {kernel!r}")
    if subset_size < 1:
        raise InvalidConfig("subset_size must be >= 1")
    if len(X) > subset_size:
        idx = np.sort(np.random.default_rng(seed).choice(len(X), size=subset_size, replace=False))
        X, y = X[idx], y[idx]
    K = kernel_matrix(X, X, kernel, length_scale)
    try:
        L = cholesky(K + sigma_n**2 * np.eye(len(X)))
    except NotPositiveDefinite as exc:
        raise NotPositiveDefinite("K + sigma_n^2 I is not positive definite; raise sigma_n") from exc
    alpha = solve_triangular(L.T, solve_triangular(L, y, lower=True), lower=False)
    return GpPosterior(kernel, float(length_scale), X, y, float(sigma_n), L, alpha)


def gp_predict(post: GpPosterior, e):
    """Predictive mean and standard deviation (latent, without the noise term)."""
    e = check_query(e, post.dim)
    single = e.ndim == 1
    Q = np.atleast_2d(e).reshape(-1, post.dim)
    k_star = kernel_matrix(Q, post.train_embeddings, post.kernel, post.length_scale)
    mean = k_star @ post.alpha
    v = solve_triangular(post.chol_K, k_star.T, lower=True)
    if post.kernel == "linear":
        prior = (Q * Q).sum(1)
    else:
        prior = np.ones(len(Q))
    var = prior - (v * v).sum(0)
    sd = np.sqrt(np.maximum(var, 0.0))
    if single:
        return float(mean[0]), float(sd[0])
    shape = e.shape[:-1]
    return mean.reshape(shape), sd.reshape(shape)


# --- reporting ------------------------------------------------------------

def correlation_report(u, err=None) -> dict:
    """Pearson and Spearman (average ranks for ties) between uncertainty and error.

    Accepts either two arrays or a single sequence of ``(U, err)`` pairs.
    """
    if err is None:
        arr = np.asarray(u, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise DegenerateInput("samples must be (U, err) pairs")
        u, err = arr[:, 0], arr[:, 1]
    u = np.asarray(u, dtype=float).ravel()
    err = np.asarray(err, dtype=float).ravel()
    if len(u) != len(err):
        raise DegenerateInput("U and err differ in length")
    if len(u) < 3:
        raise DegenerateInput("need at least 3 samples")
    if np.ptp(u) == 0 or np.ptp(err) == 0:
        raise DegenerateInput("U or err is constant")
    return {
        "pearson": _pearson(u, err),
        "spearman": _pearson(rankdata(u), rankdata(err)),
        "n": int(len(u)),
    }


def _pearson(a, b) -> float:
    a = a - a.mean()
    b = b - b.mean()
    return float((a @ b) / np.sqrt((a @ a) * (b @ b)))


# --- estimator interface -------------------------------------------------

class ConfidenceEllipsoidUncertainty(TransformerMixin, BaseEstimator):
    """Fit on training embeddings (n, d) or preference pairs (n, 2, d).

    ``transform`` returns the width ``sqrt(e^T M^{-1} e)`` as a single column,
    ``uncertainty`` the same as a flat array.
    """

    def __init__(self, lambda_ridge=1.0, refresh_every=DEFAULT_REFRESH_EVERY):
        self.lambda_ridge = lambda_ridge
        self.refresh_every = refresh_every

    def fit(self, X, y=None):
        X = check_embeddings(X, allow_nd=True)
        d = X.shape[-1]
        self.precision_ = precision_from_embeddings(X.reshape(-1, d), self.lambda_ridge, d,
                                                    self.refresh_every)
        self.n_features_in_ = d
        return self

    def uncertainty(self, X):
        check_is_fitted(self)
        X = check_embeddings(X, self.n_features_in_)
        return ci_uncertainty(self.precision_, X)

    def transform(self, X):
        return self.uncertainty(X)[:, None]


class GaussianProcessUncertainty(RegressorMixin, BaseEstimator):
    def __init__(self, kernel="rbf", length_scale=1.0, sigma_n=0.1, subset_size=512, seed=0):
        self.kernel = kernel
        self.length_scale = length_scale
        self.sigma_n = sigma_n
        self.subset_size = subset_size
        self.seed = seed

    def fit(self, X, y):
        self.posterior_ = gp_fit(X, y, self.kernel, self.sigma_n, self.subset_size, self.seed,
                                 self.length_scale)
        self.n_features_in_ = self.posterior_.dim
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self)
        X = check_embeddings(X, self.n_features_in_)
        mean, sd = gp_predict(self.posterior_, X)
        return (mean, sd) if return_std else mean
