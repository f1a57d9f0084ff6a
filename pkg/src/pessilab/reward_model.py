"""Linear reward heads over fixed embeddings, fitted by Bradley-Terry likelihood.

The loss is the mean negative log-likelihood of the observed preferences plus
``(ridge / 2) * ||phi||^2``. Note the ridge is on the *mean* loss: a ridge of
``lam / n_pairs`` corresponds to the summed loss regularized by ``lam``, which
is the geometry of the precision matrix ``lam * I + sum e e^T``
(see ``default_ridge``).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DidNotConverge, DimensionMismatch, InvalidConfig
from .synthworld import PreferenceDataset, SyntheticWorld
from .validation import check_pairs, check_query

PENALTY_STATS = ("var", "std")


def default_ridge(n_pairs: int, lambda_ridge: float = 1.0) -> float:
    """Mean-loss ridge matching a summed-loss ridge of ``lambda_ridge``."""
    return lambda_ridge / max(int(n_pairs), 1)


def preference_differences(data, world: SyntheticWorld | None = None) -> np.ndarray:
    """Rows ``e_chosen - e_rejected``; accepts a dataset (with its world) or an array."""
    if isinstance(data, PreferenceDataset):
        if world is None:
            raise InvalidConfig("a PreferenceDataset needs its world to resolve embeddings")
        data.validate_against(world)
        return data.chosen_embeddings(world) - data.rejected_embeddings(world)
    diffs = np.asarray(data, dtype=float)
    if diffs.ndim == 3:  # (n, 2, d) pairs
        diffs = check_pairs(diffs)
        return diffs[:, 0] - diffs[:, 1]
    if diffs.ndim != 2:
        raise DimensionMismatch(f"expected (n, d) differences, got shape {diffs.shape}")
    return diffs


def bt_loss(phi, data, ridge: float = 0.0, world: SyntheticWorld | None = None) -> float:
    """Mean BT negative log-likelihood plus ``(ridge/2) ||phi||^2``."""
    diffs = preference_differences(data, world)
    phi = np.asarray(phi, dtype=float)
    if diffs.shape[1] != phi.shape[0]:
        raise DimensionMismatch("phi and embeddings differ in dimension")
    nll = -log_expit(diffs @ phi).mean() if len(diffs) else 0.0
    return float(nll + 0.5 * ridge * (phi @ phi))


def bt_grad(phi, data, ridge: float = 0.0, world: SyntheticWorld | None = None) -> np.ndarray:
    diffs = preference_differences(data, world)
    phi = np.asarray(phi, dtype=float)
    if len(diffs) == 0:
        return ridge * phi
    weights = expit(-(diffs @ phi))
    return -(weights @ diffs) / len(diffs) + ridge * phi


@dataclass
class RewardHead:
    phi_hat: np.ndarray
    ridge: float
    fit_diag: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.phi_hat.shape[0]

    def to_dict(self) -> dict:
        return {"phi_hat": self.phi_hat.tolist(), "ridge": self.ridge, "fit_diag": self.fit_diag}

    @classmethod
    def from_dict(cls, d) -> "RewardHead":
        return cls(np.array(d["phi_hat"], dtype=float), float(d["ridge"]), dict(d.get("fit_diag", {})))


def fit_bt(data, ridge: float, world: SyntheticWorld | None = None, *, tol: float = 1e-6,
           max_iters: int = 5000, init=None, strict: bool = False) -> RewardHead:
    """Full-batch gradient descent with Armijo backtracking, started at ``init`` (default 0).

    Stops when the gradient norm drops to ``tol``. If ``max_iters`` is hit first,
    the head is returned with ``fit_diag["converged"] = False`` and a warning,
    or DidNotConverge is raised when ``strict``.
    """
    diffs = preference_differences(data, world)
    if len(diffs) == 0:
        raise InvalidConfig("cannot fit a reward head on an empty dataset")
    if ridge < 0:
        raise InvalidConfig("ridge must be nonnegative")
    d = diffs.shape[1]
    phi = np.zeros(d) if init is None else np.array(init, dtype=float)
    n = len(diffs)

    def loss_and_grad(p):
        z = diffs @ p
        loss = -log_expit(z).mean() + 0.5 * ridge * (p @ p)
        grad = -(expit(-z) @ diffs) / n + ridge * p
        return loss, grad

    loss, grad = loss_and_grad(phi)
    gnorm = float(np.linalg.norm(grad))
    step = 1.0
    it = 0
    while gnorm > tol and it < max_iters:
        step *= 2.0
        while True:
            cand = phi - step * grad
            cand_loss, cand_grad = loss_and_grad(cand)
            if cand_loss <= loss - 0.5 * step * gnorm**2 or step < 1e-14:
                break
            step *= 0.5
        phi, loss, grad = cand, cand_loss, cand_grad
        gnorm = float(np.linalg.norm(grad))
        it += 1

    converged = gnorm <= tol
    diag = {"final_loss": float(loss), "grad_norm": gnorm, "iters": it, "converged": bool(converged)}
    if not converged:
        msg = f"fit_bt stopped after {it} iterations with gradient norm {gnorm:.3g} > {tol:g}"
        if strict:
            raise DidNotConverge(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return RewardHead(phi, float(ridge), diag)


def predict(head: RewardHead, e) -> np.ndarray | float:
    e = check_query(e, head.dim)
    out = e @ head.phi_hat
    return float(out) if e.ndim == 1 else out


@dataclass
class EnsembleHeads:
    heads: list
    gamma: float = 1.0
    penalty_stat: str = "var"

    def __post_init__(self):
        if len(self.heads) < 2:
            raise InvalidConfig("an ensemble needs K >= 2 heads")
        if self.gamma < 0:
            raise InvalidConfig("gamma must be nonnegative")
        if self.penalty_stat not in PENALTY_STATS:
            raise InvalidConfig(f"penalty_stat must be one of {PENALTY_STATS}")

    @property
    def dim(self) -> int:
        return self.heads[0].dim

    @property
    def weights(self) -> np.ndarray:
        return np.stack([h.phi_hat for h in self.heads])

    def to_dict(self) -> dict:
        return {"heads": [h.to_dict() for h in self.heads], "gamma": self.gamma,
                "penalty_stat": self.penalty_stat}

    @classmethod
    def from_dict(cls, d) -> "EnsembleHeads":
        return cls([RewardHead.from_dict(h) for h in d["heads"]], float(d["gamma"]),
                   d.get("penalty_stat", "var"))


def fit_ensemble(data, K: int, ridge: float, seed: int, world: SyntheticWorld | None = None, *,
                 gamma: float = 1.0, penalty_stat: str = "var", bootstrap: bool = True,
                 init_jitter: float = 0.01, tol: float = 1e-6, max_iters: int = 5000) -> EnsembleHeads:
    """K heads, each on its own bootstrap resample and jittered start point."""
    if K < 2:
        raise InvalidConfig("K must be >= 2")
    diffs = preference_differences(data, world)
    rng = np.random.default_rng(seed)
    n, d = diffs.shape
    heads = []
    for _ in range(K):
        idx = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        init = init_jitter * rng.standard_normal(d)
        heads.append(fit_bt(diffs[idx], ridge, tol=tol, max_iters=max_iters, init=init))
    return EnsembleHeads(heads, gamma, penalty_stat)


def ensemble_reward(ens: EnsembleHeads, e) -> np.ndarray | float:
    """Mean head reward minus ``gamma`` times the spread across heads.

    The spread is the population variance (``penalty_stat="var"``) or its square
    root (``"std"``).
    """
    e = check_query(e, ens.dim)
    preds = e @ ens.weights.T  # (..., K)
    mean = preds.mean(axis=-1)
    spread = preds.var(axis=-1)
    if ens.penalty_stat == "std":
        spread = np.sqrt(spread)
    out = mean - ens.gamma * spread
    return float(out) if e.ndim == 1 else out


# --- estimator interface -------------------------------------------------

class BradleyTerryRewardModel(RegressorMixin, BaseEstimator):
    """Linear BT reward head as a scikit-learn estimator.

    ``fit`` takes pairs shaped (n, 2, d) with the chosen response first;
    ``predict`` maps embeddings (n, d) to rewards.
    """

    def __init__(self, ridge=1e-3, tol=1e-6, max_iters=5000):
        self.ridge = ridge
        self.tol = tol
        self.max_iters = max_iters

    def fit(self, X, y=None):
        X = check_pairs(X)
        self.head_ = fit_bt(X[:, 0] - X[:, 1], self.ridge, tol=self.tol, max_iters=self.max_iters)
        self.coef_ = self.head_.phi_hat
        self.n_features_in_ = X.shape[2]
        return self

    def predict(self, X):
        check_is_fitted(self)
        return np.asarray(predict(self.head_, np.atleast_2d(X)))

    def score(self, X, y=None):
        """Pairwise accuracy: fraction of pairs whose chosen side scores higher."""
        check_is_fitted(self)
        X = check_pairs(X, self.n_features_in_)
        return float(np.mean(X[:, 0] @ self.coef_ > X[:, 1] @ self.coef_))


class RewardEnsembleModel(BaseEstimator):
    """Bootstrap ensemble of BT heads; ``predict`` returns the penalized reward."""

    def __init__(self, n_heads=5, ridge=1e-3, gamma=1.0, penalty_stat="var", seed=0,
                 init_jitter=0.01):
        self.n_heads = n_heads
        self.ridge = ridge
        self.gamma = gamma
        self.penalty_stat = penalty_stat
        self.seed = seed
        self.init_jitter = init_jitter

    def fit(self, X, y=None):
        X = check_pairs(X)
        self.ensemble_ = fit_ensemble(X, self.n_heads, self.ridge, self.seed, gamma=self.gamma,
                                      penalty_stat=self.penalty_stat, init_jitter=self.init_jitter)
        self.n_features_in_ = X.shape[2]
        return self

    def predict(self, X):
        check_is_fitted(self)
        return np.asarray(ensemble_reward(self.ensemble_, np.atleast_2d(X)))
