"""Figures, correlation summaries and seed-paired comparison tables."""
from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np

from ..exceptions import DegenerateInput, SeedMismatch
from ..uncertainty import correlation_report

TIE_THRESHOLD = 0.01
SVG_SALT = "pessilab"


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = SVG_SALT
    return plt


def _save_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_curves(rows: list, path, title: str = "") -> None:
    """Proxy and gold against step on the left axis, mean uncertainty on the right."""
    plt = _pyplot()
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [r["proxy_mean"] for r in rows], label="proxy", color="tab:blue")
    ax.plot(steps, [r["gold_mean"] for r in rows], label="gold", color="tab:orange")
    ax.set_xlabel("step")
    ax.set_ylabel("reward")
    right = ax.twinx()
    right.plot(steps, [r["u_mean"] for r in rows], label="uncertainty", color="tab:green", ls="--")
    right.set_ylabel("mean uncertainty")
    lines = ax.get_lines() + right.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="best")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def plot_scatter(u, err, path, xlabel: str = "uncertainty") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(u, err, s=4, alpha=0.4)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("|gold - proxy|")
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def analyze(rows: list, samples: list, out_dir) -> dict:
    """Correlation summary plus the two figures; raises DegenerateInput on flat dumps."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not samples:
        raise DegenerateInput("no logged samples to analyze")
    err = np.array([s["abs_err"] for s in samples])
    summary = {"n_samples": len(samples)}
    summary["ci"] = correlation_report([s["U_ci"] for s in samples], err)
    gp = np.array([s.get("gp_sd", np.nan) for s in samples], dtype=float)
    if np.all(np.isfinite(gp)):
        try:
            summary["gp"] = correlation_report(gp, err)
        except DegenerateInput:
            summary["gp"] = None
    plot_curves(rows, out_dir / "curves.svg")
    plot_scatter([s["U_ci"] for s in samples], err, out_dir / "scatter.svg")
    summary["figures"] = ["curves.svg", "scatter.svg"]
    return summary


def compare(results: dict, tie: float = TIE_THRESHOLD) -> list:
    """Pairwise win/tie/lose counts by gold at the best checkpoint.

    ``results`` maps a label to ``{seed: gold_at_best}``; every label must cover
    the same seeds.
    """
    seed_sets = {label: frozenset(d) for label, d in results.items()}
    if len(set(seed_sets.values())) > 1:
        raise SeedMismatch(f"seed sets differ: { {k: sorted(v) for k, v in seed_sets.items()} }")
    table = []
    for a, b in itertools.permutations(sorted(results), 2):
        win = tie_n = lose = 0
        for seed in sorted(results[a]):
            d = results[a][seed] - results[b][seed]
            if abs(d) < tie:
                tie_n += 1
            elif d > 0:
                win += 1
            else:
                lose += 1
        table.append({"variant": a, "opponent": b, "win": win, "tie": tie_n, "lose": lose,
                      "n_seeds": win + tie_n + lose})
    return table


def format_table(table: list) -> str:
    head = f"{'variant':<16}{'opponent':<16}{'win':>5}{'tie':>5}{'lose':>6}"
    lines = [head, "-" * len(head)]
    for r in table:
        lines.append(f"{r['variant']:<16}{r['opponent']:<16}{r['win']:>5}{r['tie']:>5}{r['lose']:>6}")
    return "\n".join(lines)
