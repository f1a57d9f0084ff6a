"""Pessimistic reward adjustment over the confidence ellipsoid of the reward head.

The adversary minimizes ``g @ phi`` over ``||phi - phi_hat||_M^2 <= B`` where
``g`` is the policy's expected embedding minus the reference responses'
expected embedding. The minimizer is ``phi_pess = phi_hat - M^{-1} g / lam``
with ``lam = sqrt(g^T M^{-1} g / B)``, so optimizing against it amounts to the
per-sample reward ``r_hat(e) - e^T M^{-1} g / lam``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import DimensionMismatch, EmptyBatch, InvalidConfig
from .linalg import quad_form_inv, quad_forms, solve_spd
from .reward_model import RewardHead
from .uncertainty import PrecisionState, ci_uncertainty
from .validation import check_query, check_vector

G_FLOOR = 1e-9
RESCALE_DECAY = 0.99
_RESCALE_GUARD = 1e-8


@dataclass(frozen=True)
class AdvpoConfig:
    B: float = 5.0
    use_reference: bool = True
    g_floor: float = G_FLOOR
    rescale: bool = False

    def __post_init__(self):
        if not self.B > 0:
            raise InvalidConfig("B must be positive")
        if not self.g_floor > 0:
            raise InvalidConfig("g_floor must be positive")


@dataclass(frozen=True)
class PessimisticAdjustment:
    g: np.ndarray
    lambda_star: float  # 0.0 is the sentinel for a vanishing direction
    minv_g: np.ndarray
    phi_pess: np.ndarray
    inner_value: float
    g_norm_minv: float

    @property
    def active(self) -> bool:
        return self.lambda_star > 0


def compute_g(policy_expected_embedding, ref_expected_embedding=None) -> np.ndarray:
    """Aggregate direction the adversary punishes; the policy expectation alone without a reference."""
    g = check_vector(policy_expected_embedding, name="policy_expected_embedding").copy()
    if ref_expected_embedding is not None:
        g = g - check_vector(ref_expected_embedding, len(g), name="ref_expected_embedding")
    return g


def lambda_star(prec: PrecisionState, g, B: float, g_floor: float = G_FLOOR) -> float:
    """Optimal multiplier ``sqrt(g^T M^{-1} g / B)``; 0 when ``||g||_{M^-1} <= g_floor``."""
    if not B > 0:
        raise InvalidConfig("B must be positive")
    q = quad_form_inv(prec.m, check_vector(g, prec.dim, name="g"))
    if np.sqrt(q) <= g_floor:
        return 0.0
    return float(np.sqrt(q / B))


def inner_min_value(head: RewardHead, prec: PrecisionState, g, B: float) -> float:
    """``min g^T phi`` over the ellipsoid, i.e. ``g^T phi_hat - sqrt(B g^T M^{-1} g)``."""
    if not B > 0:
        raise InvalidConfig("B must be positive")
    g = check_vector(g, prec.dim, name="g")
    return float(g @ head.phi_hat - np.sqrt(B * quad_form_inv(prec.m, g)))


def build_adjustment(head: RewardHead, prec: PrecisionState, g, B: float,
                     g_floor: float = G_FLOOR) -> PessimisticAdjustment:
    g = check_vector(g, prec.dim, name="g")
    if head.dim != prec.dim:
        raise DimensionMismatch("head and precision differ in dimension")
    lam = lambda_star(prec, g, B, g_floor)
    minv_g = solve_spd(prec.m, g)
    g_norm = float(np.sqrt(max(g @ minv_g, 0.0)))
    if lam > 0:
        phi_pess = head.phi_hat - minv_g / lam
    else:
        phi_pess = head.phi_hat.copy()
    return PessimisticAdjustment(g=g, lambda_star=lam, minv_g=minv_g, phi_pess=phi_pess,
                                 inner_value=inner_min_value(head, prec, g, B), g_norm_minv=g_norm)


def adjusted_reward(head: RewardHead, prec: PrecisionState, adj: PessimisticAdjustment, e):
    """``r_hat(e) - e^T M^{-1} g / lambda_star``; unchanged reward under the sentinel."""
    e = check_query(e, prec.dim)
    out = e @ head.phi_hat
    if adj.active:
        out = out - (e @ adj.minv_g) / adj.lambda_star
    return float(out) if e.ndim == 1 else out


def samplewise_adjusted_reward(head: RewardHead, prec: PrecisionState, B: float, e):
    """Each sample pays its own confidence width: ``r_hat(e) - sqrt(B) * U(e)``."""
    if not B > 0:
        raise InvalidConfig("B must be positive")
    e = check_query(e, prec.dim)
    out = e @ head.phi_hat - np.sqrt(B) * ci_uncertainty(prec, e)
    return float(out) if e.ndim == 1 else out


def pessimism_gap(prec: PrecisionState, B: float, batch_g) -> dict:
    """Penalty of the aggregate adversary versus the mean of per-sample penalties."""
    batch_g = np.asarray(batch_g, dtype=float)
    if batch_g.size == 0:
        raise EmptyBatch("batch_g is empty")
    batch_g = batch_g.reshape(-1, prec.dim) if batch_g.ndim == 1 else batch_g
    if batch_g.shape[-1] != prec.dim:
        raise DimensionMismatch("batch vectors do not match the precision dimension")
    rb = np.sqrt(B)
    advpo = rb * np.sqrt(quad_form_inv(prec.m, batch_g.mean(axis=0)))
    samplewise = rb * np.sqrt(quad_forms(prec.m, batch_g)).mean()
    return {"advpo_penalty": float(advpo), "samplewise_penalty": float(samplewise)}


def oracle_inner_min(head: RewardHead, prec: PrecisionState, g, B: float, iters: int = 600,
                     seed: int = 0) -> float:
    """Projected gradient descent for the inner minimization, as a cross-check.

    Works in whitened coordinates ``u = L^T (phi - phi_hat)`` where the feasible
    set is the Euclidean ball of radius ``sqrt(B)``. Starts from a random interior
    point and returns the best value seen.
    """
    g = check_vector(g, prec.dim, name="g")
    L = prec.m.chol
    c = solve_triangular(L, g, lower=True)  # gradient of g^T phi with respect to u
    radius = np.sqrt(B)
    base = float(g @ head.phi_hat)
    cn = np.linalg.norm(c)
    if cn == 0:
        return base
    step = 0.05 * radius / cn
    u = np.random.default_rng(seed).standard_normal(len(g))
    u *= 0.5 * radius / np.linalg.norm(u)
    best = np.inf
    for _ in range(iters):
        u = u - step * c
        nu = np.linalg.norm(u)
        if nu > radius:
            u *= radius / nu
        phi = head.phi_hat + solve_triangular(L.T, u, lower=False)
        best = min(best, float(g @ phi))
    return best


@dataclass
class RescaleState:
    """Running means of mean |raw| and mean |adjusted| reward."""

    decay: float = RESCALE_DECAY
    raw_mean: float | None = None
    adjusted_mean: float | None = None
    factor: float = field(default=1.0)


def dynamic_rescale(state: RescaleState, raw_batch, adjusted_batch, weights=None) -> np.ndarray:
    """Scale adjusted rewards back to the running magnitude of the raw rewards.

    Updates ``state`` in place; the first call seeds the running means with the
    batch statistics. ``weights`` (same shape, e.g. policy probabilities) turns
    the batch means into weighted means.
    """
    raw = np.asarray(raw_batch, dtype=float)
    adj = np.asarray(adjusted_batch, dtype=float)
    if raw.shape != adj.shape:
        raise DimensionMismatch("raw and adjusted batches differ in shape")
    if weights is None:
        a_raw = float(np.abs(raw).mean()) if raw.size else 0.0
        a_adj = float(np.abs(adj).mean()) if adj.size else 0.0
    else:
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        a_raw = float((w * np.abs(raw)).sum() / total) if total > 0 else 0.0
        a_adj = float((w * np.abs(adj)).sum() / total) if total > 0 else 0.0
    if state.raw_mean is None:
        state.raw_mean, state.adjusted_mean = a_raw, a_adj
    else:
        state.raw_mean = state.decay * state.raw_mean + (1 - state.decay) * a_raw
        state.adjusted_mean = state.decay * state.adjusted_mean + (1 - state.decay) * a_adj
    state.factor = state.raw_mean / max(state.adjusted_mean, _RESCALE_GUARD)
    return adj * state.factor
