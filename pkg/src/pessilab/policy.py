"""Tabular softmax policy over finite candidate pools, trained by exact gradient ascent.

Expectations over each prompt's pool are computed exactly, so every step is
the true gradient of ``E_pi[r] - beta * KL(pi || pi_ref)`` for the current
reward table. Five reward transforms are supported: ``vanilla`` (raw proxy),
``samplewise`` (per-sample confidence penalty), ``ensemble`` (mean minus
spread), ``advpo`` and ``advpo_noref`` (closed-form pessimistic adjustment with
and without reference responses).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from . import advpo as adv
from .exceptions import IndexOutOfRange, InvalidConfig, MissingInput, NonFiniteEncountered, ShapeMismatch
from .linalg import quad_form_inv
from .reward_model import EnsembleHeads, RewardHead, ensemble_reward
from .synthworld import SyntheticWorld, reference_embedding
from .uncertainty import PrecisionState, ci_uncertainty

VARIANTS = ("vanilla", "samplewise", "ensemble", "advpo", "advpo_noref")
METRIC_COLUMNS = (
    "step", "proxy_mean", "gold_mean", "kl_mean", "u_mean", "penalty_mean", "objective",
    "lambda_star", "g_norm_minv", "advpo_penalty", "samplewise_penalty", "val_proxy",
)
SAMPLE_COLUMNS = ("step", "prompt_id", "cand_idx", "is_ood", "U_ci", "proxy", "gold", "abs_err")


@dataclass
class PolicyState:
    prompt_ids: np.ndarray
    logits: np.ndarray
    ref_logits: np.ndarray
    step: int = 0

    def __post_init__(self):
        self.prompt_ids = np.asarray(self.prompt_ids, dtype=np.int64)
        self.logits = np.array(self.logits, dtype=float)
        self.ref_logits = np.array(self.ref_logits, dtype=float)
        if self.logits.shape != self.ref_logits.shape or self.logits.ndim != 2:
            raise ShapeMismatch("logits and ref_logits must share a (prompts, candidates) shape")
        if len(self.prompt_ids) != len(self.logits):
            raise ShapeMismatch("one logit row per prompt id")
        if not np.all(np.isfinite(self.logits)):
            raise NonFiniteEncountered("non-finite logits")

    @classmethod
    def initial(cls, world: SyntheticWorld, prompt_ids, ref_logits=None) -> "PolicyState":
        """Start at the reference policy (the world's SFT stand-in unless given)."""
        prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
        ref = world.sft_logits()[prompt_ids] if ref_logits is None else np.asarray(ref_logits, float)
        return cls(prompt_ids, ref.copy(), ref.copy())

    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=1)

    def ref_probs(self) -> np.ndarray:
        return softmax(self.ref_logits, axis=1)

    def row(self, prompt_id) -> int:
        hits = np.flatnonzero(self.prompt_ids == prompt_id)
        if len(hits) == 0:
            raise IndexOutOfRange(f"prompt {prompt_id} is not covered by this policy")
        return int(hits[0])

    def copy(self) -> "PolicyState":
        return dataclasses.replace(self, logits=self.logits.copy(), ref_logits=self.ref_logits.copy())


def _check_rewards(policy: PolicyState, rewards) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=float)
    if rewards.shape != policy.logits.shape:
        raise ShapeMismatch(f"reward table {rewards.shape} vs policy {policy.logits.shape}")
    return rewards


def _kl_rows(logits, ref_logits) -> np.ndarray:
    logp = log_softmax(logits, axis=1)
    logq = log_softmax(ref_logits, axis=1)
    p = np.exp(logp)
    return np.maximum((p * (logp - logq)).sum(axis=1), 0.0)


def kl_divergence(policy: PolicyState, prompt_id) -> float:
    """Exact ``KL(pi || pi_ref)`` for one prompt over its finite pool."""
    r = policy.row(prompt_id)
    return float(_kl_rows(policy.logits[r:r + 1], policy.ref_logits[r:r + 1])[0])


def objective(policy: PolicyState, rewards, beta: float, ref_rewards=None) -> float:
    """Mean over prompts of ``E_pi[r] - beta KL``, minus the mean reference reward if given."""
    rewards = _check_rewards(policy, rewards)
    p = policy.probs()
    value = (p * rewards).sum(axis=1) - beta * _kl_rows(policy.logits, policy.ref_logits)
    out = float(value.mean())
    if ref_rewards is not None:
        ref_rewards = np.asarray(ref_rewards, dtype=float)
        if ref_rewards.ndim and ref_rewards.shape != (len(policy.prompt_ids),):
            raise ShapeMismatch("one reference reward per prompt")
        out -= float(np.mean(ref_rewards))
    return out


def policy_gradient(policy: PolicyState, rewards, beta: float) -> np.ndarray:
    """Per-prompt gradient of ``E_pi[r] - beta KL(pi || pi_ref)`` with respect to the logits."""
    rewards = _check_rewards(policy, rewards)
    logp = log_softmax(policy.logits, axis=1)
    p = np.exp(logp)
    adv_r = rewards - (p * rewards).sum(axis=1, keepdims=True)
    if beta:
        log_ratio = logp - log_softmax(policy.ref_logits, axis=1)
        adv_r = adv_r - beta * (log_ratio - (p * log_ratio).sum(axis=1, keepdims=True))
    return p * adv_r


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "vanilla"
    beta: float = 0.0
    B: float = 5.0
    steps: int = 1500
    lr: float = 100.0
    eval_every: int = 100
    rescale: bool = False
    seed: int = 0
    sample_every: int = 10
    g_floor: float = adv.G_FLOOR

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"variant must be one of {VARIANTS}")
        if self.steps < 1:
            raise InvalidConfig("steps must be >= 1")
        if not self.lr >= 0:
            raise InvalidConfig("lr must be nonnegative")
        if self.beta < 0:
            raise InvalidConfig("beta must be nonnegative")
        if not self.B > 0:
            raise InvalidConfig("B must be positive")
        if self.eval_every < 1 or self.sample_every < 0:
            raise InvalidConfig("eval_every must be >= 1 and sample_every >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)
    best_checkpoint: dict | None = None
    samples: list = field(default_factory=list)
    final_policy: PolicyState | None = None

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)


def train(world: SyntheticWorld, head: RewardHead, prec: PrecisionState | None = None,
          ens: EnsembleHeads | None = None, config: TrainConfig = TrainConfig(), *,
          references=None, z_ref=None, ref_reward_shift: float = 0.0,
          init_policy: PolicyState | None = None) -> RunMetrics:
    """Run one training loop and return the per-step log.

    The policy covers the policy and validation prompts; metrics and the
    adversarial direction use the policy prompts, ``val_proxy`` the validation
    prompts. Rows log the policy *before* that step's update.

    ``references`` holds the reference candidate per world prompt (needed by
    ``advpo``); ``z_ref`` overrides the mean reference embedding, in which case
    every prompt's reference embedding is taken to be ``z_ref``.
    """
    variant = config.variant
    if variant in ("samplewise", "advpo", "advpo_noref") and prec is None:
        raise MissingInput(f"variant {variant!r} needs the precision state")
    if variant == "ensemble" and ens is None:
        raise MissingInput("variant 'ensemble' needs an ensemble")

    train_ids = world.splits["policy"]
    val_ids = world.splits["validation"]
    if len(train_ids) == 0:
        raise MissingInput("the policy split is empty")
    policy = (init_policy.copy() if init_policy is not None
              else PolicyState.initial(world, np.concatenate([train_ids, val_ids])))
    n_train = len(train_ids)
    if not np.array_equal(policy.prompt_ids[:n_train], train_ids):
        raise ShapeMismatch("policy rows must start with the policy-split prompts")
    tr = slice(0, n_train)
    va = slice(n_train, len(policy.prompt_ids))
    has_val = len(policy.prompt_ids) > n_train

    E = world.embeddings[policy.prompt_ids]
    with np.errstate(over="ignore", invalid="ignore"):
        raw = E @ head.phi_hat
    if not np.all(np.isfinite(raw)):
        raise NonFiniteEncountered("proxy rewards are not finite", {"step": 0})
    gold = E @ world.phi_star
    U = ci_uncertainty(prec, E) if prec is not None else None
    rb = np.sqrt(config.B)

    # per-prompt reference embeddings for the advpo family and for logging
    ref_emb = None
    if variant == "advpo":
        if z_ref is not None:
            z_ref = np.asarray(z_ref, dtype=float)
            ref_emb = np.broadcast_to(z_ref, (len(policy.prompt_ids), world.dim))
        else:
            if references is None:
                raise MissingInput("variant 'advpo' needs reference responses")
            references = np.asarray(references)
            z_ref = reference_embedding(world, references, train_ids)
            ref_emb = world.embeddings[policy.prompt_ids, references[policy.prompt_ids]]
    if prec is not None:
        g_rows = E - ref_emb[:, None, :] if ref_emb is not None else E
        sw_norms = ci_uncertainty(prec, g_rows)
    else:
        sw_norms = None

    static = None
    if variant == "vanilla":
        static = raw
    elif variant == "samplewise":
        static = raw - rb * U
    elif variant == "ensemble":
        static = ensemble_reward(ens, E)

    rescaler = adv.RescaleState() if config.rescale and variant != "vanilla" else None
    rng = np.random.default_rng(config.seed)
    metrics = RunMetrics()
    best_val = -np.inf
    nan = float("nan")

    for s in range(config.steps):
        p = policy.probs()
        pt = p[tr]
        lam = g_norm = advpo_pen = nan
        ref_rewards = None
        if static is not None:
            rewards = static
        else:
            g = adv.compute_g(np.einsum("pc,pcd->d", pt, E[tr]) / n_train,
                              z_ref if variant == "advpo" else None)
            adj = adv.build_adjustment(head, prec, g, config.B, config.g_floor)
            rewards = adv.adjusted_reward(head, prec, adj, E)
            lam, g_norm = adj.lambda_star, adj.g_norm_minv
            advpo_pen = rb * g_norm
            if variant == "advpo":
                ref_rewards = adv.adjusted_reward(head, prec, adj, ref_emb[tr])
        if rescaler is not None:
            rewards = adv.dynamic_rescale(rescaler, raw, rewards, weights=p)

        kl = _kl_rows(policy.logits[tr], policy.ref_logits[tr])
        row = {
            "step": s,
            "proxy_mean": float((pt * raw[tr]).sum(1).mean()),
            "gold_mean": float((pt * gold[tr]).sum(1).mean()),
            "kl_mean": float(kl.mean()),
            "u_mean": float((pt * U[tr]).sum(1).mean()) if U is not None else nan,
            "penalty_mean": float((pt * (raw[tr] - rewards[tr])).sum(1).mean()),
            "objective": float(((pt * rewards[tr]).sum(1) - config.beta * kl).mean()
                               - (ref_rewards.mean() if ref_rewards is not None else 0.0)
                               - ref_reward_shift),
            "lambda_star": lam,
            "g_norm_minv": g_norm,
            "advpo_penalty": advpo_pen if variant.startswith("advpo") else
            (rb * float(np.sqrt(max(_mean_g_norm2(pt, g_rows[tr], prec), 0.0))) if prec is not None else nan),
            "samplewise_penalty": rb * float((pt * sw_norms[tr]).sum(1).mean()) if sw_norms is not None else nan,
            "val_proxy": nan,
        }

        if s % config.eval_every == 0 or s == config.steps - 1:
            val = float((p[va] * raw[va]).sum(1).mean()) if has_val else row["proxy_mean"]
            row["val_proxy"] = val
            if val > best_val:
                best_val = val
                metrics.best_checkpoint = {
                    "step": s, "val_proxy": val, "gold_mean": row["gold_mean"],
                    "proxy_mean": row["proxy_mean"], "u_mean": row["u_mean"],
                    "logits": policy.logits.copy(),
                }

        if config.sample_every and s % config.sample_every == 0:
            cum = pt.cumsum(axis=1)
            picks = (cum < rng.random((n_train, 1)) * cum[:, -1:]).sum(axis=1)
            picks = np.minimum(picks, pt.shape[1] - 1)
            for i, c in enumerate(picks):
                pid = int(policy.prompt_ids[i])
                metrics.samples.append({
                    "step": s, "prompt_id": pid, "cand_idx": int(c),
                    "is_ood": bool(world.is_ood[pid, c]),
                    "U_ci": float(U[i, c]) if U is not None else nan,
                    "proxy": float(raw[i, c]), "gold": float(gold[i, c]),
                    "abs_err": float(abs(gold[i, c] - raw[i, c])),
                })

        metrics.rows.append(row)
        if not np.all(np.isfinite(rewards)):
            raise NonFiniteEncountered(f"non-finite rewards at step {s}", {"step": s, "last_row": row})
        grad = policy_gradient(policy, rewards, config.beta)
        with np.errstate(over="ignore", invalid="ignore"):
            policy.logits = policy.logits + config.lr * grad
        policy.step = s + 1
        if not np.all(np.isfinite(policy.logits)):
            raise NonFiniteEncountered(f"non-finite logits after step {s}",
                                       {"step": s, "last_row": row})

    metrics.final_policy = policy
    return metrics


def _mean_g_norm2(pt, g_rows, prec):
    """Squared M^-1 norm of the policy-averaged direction (aggregate penalty for logging)."""
    gbar = np.einsum("pc,pcd->d", pt, g_rows) / len(pt)
    return quad_form_inv(prec.m, gbar)
