"""Programmatic experiment pipeline: world -> preferences -> heads -> training runs.

The CLI is a thin layer over these functions; tests call them directly.
"""
from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np

from ..exceptions import InvalidConfig, NoStableB
from ..policy import RunMetrics, TrainConfig, train
from ..reward_model import EnsembleHeads, RewardHead, default_ridge, fit_bt, fit_ensemble
from ..synthworld import PreferenceDataset, SyntheticWorld, WorldConfig, gen_preferences, gen_world
from ..uncertainty import PrecisionState, build_precision

B_GRID = (1.0, 5.0, 10.0, 15.0)
SLOPE_THRESHOLD = 1e-4
LATE_FRACTION = 0.2
DEFAULT_PAIRS = 2000


@dataclass
class Setup:
    world: SyntheticWorld
    prefs: PreferenceDataset
    head: RewardHead
    prec: PrecisionState
    ens: EnsembleHeads | None = None


def fit_models(world: SyntheticWorld, prefs: PreferenceDataset, lambda_ridge: float = 1.0,
               n_heads: int = 0, gamma: float = 1.0, seed: int = 0) -> Setup:
    """Proxy head, precision matrix and (when ``n_heads >= 2``) a bootstrap ensemble."""
    ridge = default_ridge(len(prefs), lambda_ridge)
    head = fit_bt(prefs, ridge, world)
    prec = build_precision(prefs, world, lambda_ridge)
    ens = fit_ensemble(prefs, n_heads, ridge, seed, world, gamma=gamma) if n_heads >= 2 else None
    return Setup(world, prefs, head, prec, ens)


def prepare(seed: int = 0, n_pairs: int = DEFAULT_PAIRS, n_heads: int = 0, gamma: float = 1.0,
            lambda_ridge: float = 1.0, **world_kw) -> Setup:
    """Default pipeline for one seed; the same seed drives world, labels and ensemble."""
    world = gen_world(WorldConfig(seed=seed, **world_kw))
    prefs = gen_preferences(world, n_pairs, seed=seed)
    return fit_models(world, prefs, lambda_ridge, n_heads, gamma, seed)


def run(setup: Setup, config: TrainConfig, **kw) -> RunMetrics:
    return train(setup.world, setup.head, setup.prec, setup.ens, config,
                 references=setup.prefs.references, **kw)


def gold_at_best(metrics: RunMetrics) -> float:
    return float(metrics.best_checkpoint["gold_mean"])


def overopt_signature(metrics: RunMetrics) -> dict:
    """Gold peak versus final gold, and whether proxy kept rising past the gold peak."""
    gold = metrics.column("gold_mean")
    proxy = metrics.column("proxy_mean")
    peak = int(np.argmax(gold))
    base = gold[0]
    # relative to the peak magnitude; unit scale when the peak sits at zero
    span = abs(gold[peak]) if abs(gold[peak]) > 1e-12 else 1.0
    drop = float((gold[peak] - gold[-1]) / span)
    return {
        "peak_step": int(metrics.rows[peak]["step"]),
        "gold_start": float(base),
        "gold_peak": float(gold[peak]),
        "gold_final": float(gold[-1]),
        "drop_fraction": drop,
        "proxy_at_peak": float(proxy[peak]),
        "proxy_final": float(proxy[-1]),
        "proxy_rose": bool(proxy[-1] > proxy[peak]),
    }


def late_slope(values, fraction: float = LATE_FRACTION) -> float:
    """Least-squares slope per step over the final ``fraction`` of a series."""
    y = np.asarray(values, dtype=float)
    n = max(int(np.ceil(fraction * len(y))), 2)
    if len(y) < 2:
        return 0.0
    y = y[-n:]
    x = np.arange(len(y), dtype=float)
    return float(np.polyfit(x, y, 1)[0])


def select_b(results: dict, threshold: float = SLOPE_THRESHOLD) -> dict:
    """Pick B from ``{B: RunMetrics}`` runs.

    Stable values have a late-phase ``u_mean`` slope at most ``threshold``;
    among them the highest best-checkpoint validation proxy wins, ties going
    to the smaller B. Without any stable value the same rule runs over all of
    them and NoStableB is warned.
    """
    if not results:
        raise InvalidConfig("no runs to select from")
    report = {}
    for B, m in results.items():
        report[float(B)] = {
            "slope": late_slope(m.column("u_mean")),
            "val_proxy": float(m.best_checkpoint["val_proxy"]),
            "gold_at_best": gold_at_best(m),
        }
    stable = [b for b, r in report.items() if r["slope"] <= threshold]
    pool = stable
    if not stable:
        warnings.warn(f"no B met the slope threshold {threshold:g}; slopes: "
                      f"{ {b: r['slope'] for b, r in report.items()} }", NoStableB, stacklevel=2)
        pool = list(report)
    chosen = min(pool, key=lambda b: (-report[b]["val_proxy"], b))
    return {"selected": chosen, "stable": sorted(stable), "per_B": report}


def sweep_b(setup: Setup, base: TrainConfig, grid=B_GRID, threshold: float = SLOPE_THRESHOLD) -> tuple:
    runs = {float(B): run(setup, dataclasses.replace(base, B=float(B))) for B in grid}
    return select_b(runs, threshold), runs
