"""Command-line entry point: ``pessilab {gen-data,run,sweep-b,analyze,compare}``.

Exit codes: 0 success, 2 invalid flags or inputs, 3 I/O failure,
4 non-finite values during training, 5 degenerate analysis input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from ..exceptions import DegenerateInput, NonFiniteEncountered, NoStableB, PessilabError
from ..policy import METRIC_COLUMNS, SAMPLE_COLUMNS, VARIANTS, RunMetrics, TrainConfig
from ..reward_model import default_ridge, fit_bt, fit_ensemble
from ..synthworld import (WorldConfig, dump_json, gen_preferences, gen_world, load_prefs, load_world,
                          prefs_to_dict, save_prefs, save_world)
from ..uncertainty import build_precision, gp_fit, gp_predict
from . import experiment as ex
from . import reports
from .manifest import RunManifest, canonical_hash, load_manifest, read_rows, resolve_out, save_manifest, write_rows

log = logging.getLogger("pessilab")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NONFINITE, EXIT_DEGENERATE = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _positive(kind):
    def parse(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


def _fraction(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


def _grid(text):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text}")
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("grid values must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pessilab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a world and a preference dataset")
    g.add_argument("--dim", type=_positive(int), default=16)
    g.add_argument("--prompts", type=_positive(int), default=200)
    g.add_argument("--candidates", type=_positive(int), default=16)
    g.add_argument("--ood-frac", type=_fraction, default=0.25)
    g.add_argument("--ood-shift", type=float, default=WorldConfig.ood_shift)
    g.add_argument("--noise", type=_fraction, default=0.30)
    g.add_argument("--pairs", type=_positive(int), default=ex.DEFAULT_PAIRS)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    def train_flags(q):
        q.add_argument("--world", required=True)
        q.add_argument("--prefs", required=True)
        q.add_argument("--beta", type=float, default=0.0)
        q.add_argument("--steps", type=_positive(int), default=TrainConfig.steps)
        q.add_argument("--lr", type=_positive(float), default=TrainConfig.lr)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--eval-every", type=_positive(int), default=TrainConfig.eval_every)
        q.add_argument("--sample-every", type=int, default=TrainConfig.sample_every)
        q.add_argument("--rescale", action="store_true")
        q.add_argument("--lambda-ridge", type=_positive(float), default=1.0)
        q.add_argument("--gp-subset", type=int, default=512,
                       help="GP training subset size for the per-sample gp_sd column (0 disables)")
        q.add_argument("--out", required=True)

    r = sub.add_parser("run", help="train one policy variant")
    train_flags(r)
    r.add_argument("--variant", choices=VARIANTS, required=True)
    r.add_argument("--B", type=_positive(float), default=TrainConfig.B)
    r.add_argument("--gamma", type=float, default=1.0)
    r.add_argument("--n-heads", type=int, default=5)
    r.add_argument("--penalty-stat", choices=("var", "std"), default="var")
    r.add_argument("--label", help="name used by compare (default: the variant)")

    s = sub.add_parser("sweep-b", help="run advpo over a B grid and select B")
    train_flags(s)
    s.add_argument("--grid", type=_grid, default=list(ex.B_GRID))
    s.add_argument("--threshold", type=float, default=ex.SLOPE_THRESHOLD)

    a = sub.add_parser("analyze", help="correlations and figures for a finished run")
    a.add_argument("--run", required=True, help="run directory or manifest path")
    a.add_argument("--out", help="output directory (default: the run directory)")

    c = sub.add_parser("compare", help="seed-paired win/tie/lose table")
    c.add_argument("--runs", nargs="+", required=True, help="run directories or manifests")
    c.add_argument("--tie", type=float, default=reports.TIE_THRESHOLD)
    c.add_argument("--out", required=True)
    return p


# --- commands ------------------------------------------------------------

def _load_inputs(args):
    world = load_world(args.world)
    prefs = load_prefs(args.prefs)
    prefs.validate_against(world)
    if prefs.provenance.get("world_config_hash") not in (None, world.config.content_hash()):
        raise UsageError("preference file was generated for a different world")
    return world, prefs


def cmd_gen_data(args) -> int:
    cfg = WorldConfig(dim=args.dim, n_prompts=args.prompts, candidates_per_prompt=args.candidates,
                      ood_fraction=args.ood_frac, ood_shift=args.ood_shift, noise_rate=args.noise,
                      seed=args.seed, heldout_dim=min(WorldConfig.heldout_dim, args.dim - 1))
    world = gen_world(cfg)
    prefs = gen_preferences(world, args.pairs, seed=args.seed)
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_world(world, out / "world.json")
    save_prefs(prefs, out / "prefs.json")
    print(f"world {world.content_hash()}")
    print(f"prefs {canonical_hash(prefs_to_dict(prefs))}")
    return EXIT_OK


def _gp_column(world, prefs, head, samples, subset, seed):
    """Per-sample GP posterior sd, fitted to proxy rewards on training embeddings."""
    if subset <= 0 or not samples:
        return None
    X = np.concatenate([prefs.chosen_embeddings(world), prefs.rejected_embeddings(world)])
    post = gp_fit(X, X @ head.phi_hat, kernel="rbf", sigma_n=0.1, subset_size=subset, seed=seed)
    Q = world.embeddings[[s["prompt_id"] for s in samples], [s["cand_idx"] for s in samples]]
    return gp_predict(post, Q)[1]


def execute_run(world, prefs, cfg: TrainConfig, out: Path, lambda_ridge=1.0, n_heads=5, gamma=1.0,
                penalty_stat="var", label=None, gp_subset=512, world_path=None, prefs_path=None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    ridge = default_ridge(len(prefs), lambda_ridge)
    head = fit_bt(prefs, ridge, world)
    prec = build_precision(prefs, world, lambda_ridge)
    ens = None
    if cfg.variant == "ensemble":
        ens = fit_ensemble(prefs, n_heads, ridge, cfg.seed, world, gamma=gamma, penalty_stat=penalty_stat)
    setup = ex.Setup(world, prefs, head, prec, ens)
    metrics = ex.run(setup, cfg)

    gp_sd = _gp_column(world, prefs, head, metrics.samples, gp_subset, cfg.seed)
    for i, s in enumerate(metrics.samples):
        s["gp_sd"] = float(gp_sd[i]) if gp_sd is not None else float("nan")

    write_rows(out / "metrics.csv", metrics.rows, METRIC_COLUMNS)
    write_rows(out / "samples.csv", metrics.samples, SAMPLE_COLUMNS + ("gp_sd",))
    dump_json(head.to_dict(), out / "head.json")
    artifacts = {"metrics": "metrics.csv", "samples": "samples.csv", "head": "head.json"}
    if ens is not None:
        dump_json(ens.to_dict(), out / "ensemble.json")
        artifacts["ensemble"] = "ensemble.json"

    best = metrics.best_checkpoint
    summary = {
        "label": label or cfg.variant,
        "variant": cfg.variant,
        "B": cfg.B,
        "best_step": best["step"],
        "gold_at_best": best["gold_mean"],
        "proxy_at_best": best["proxy_mean"],
        "val_proxy_at_best": best["val_proxy"],
        "gold_final": metrics.rows[-1]["gold_mean"],
        **{k: v for k, v in ex.overopt_signature(metrics).items() if k != "peak_step"},
        "late_u_slope": ex.late_slope(metrics.column("u_mean")),
    }
    world_hash = world.content_hash()
    prefs_hash = canonical_hash(prefs_to_dict(prefs))
    config = {
        "world": world.config.to_dict(),
        "reward": {"lambda_ridge": lambda_ridge, "ridge": ridge, "n_heads": n_heads if ens else 0,
                   "gamma": gamma, "penalty_stat": penalty_stat, "gp_targets": "proxy reward",
                   "gp_subset": gp_subset},
        "advpo": {"B": cfg.B, "use_reference": cfg.variant == "advpo", "g_floor": cfg.g_floor,
                  "rescale": cfg.rescale},
        "train": cfg.to_dict(),
    }
    inputs = {"world": world_hash, "prefs": prefs_hash, "config": config}
    manifest = RunManifest(
        kind="run", config=config,
        seeds={"world": world.config.seed, "prefs": prefs.provenance.get("seed"), "train": cfg.seed},
        artifacts=artifacts, inputs_hash=canonical_hash(inputs), summary=summary,
        extra={"best_checkpoint": {"step": best["step"], "logits": best["logits"].tolist(),
                                   "prompt_ids": metrics.final_policy.prompt_ids.tolist()},
               "inputs": {"world": str(world_path) if world_path else None,
                          "prefs": str(prefs_path) if prefs_path else None}},
    )
    save_manifest(manifest, out / "manifest.json")
    return summary


def _train_config(args, variant, B) -> TrainConfig:
    return TrainConfig(variant=variant, beta=args.beta, B=B, steps=args.steps, lr=args.lr,
                       eval_every=args.eval_every, rescale=args.rescale, seed=args.seed,
                       sample_every=args.sample_every)


def cmd_run(args) -> int:
    world, prefs = _load_inputs(args)
    cfg = _train_config(args, args.variant, args.B)
    summary = execute_run(world, prefs, cfg, resolve_out(args.out), args.lambda_ridge, args.n_heads,
                          args.gamma, args.penalty_stat, args.label, args.gp_subset, args.world, args.prefs)
    keys = ("variant", "B", "gold_at_best", "proxy_at_best")
    print(json.dumps({k: summary[k] for k in keys}, sort_keys=False))
    return EXIT_OK


def cmd_sweep_b(args) -> int:
    world, prefs = _load_inputs(args)
    out = resolve_out(args.out)
    runs = {}
    for B in args.grid:
        cfg = _train_config(args, "advpo", B)
        execute_run(world, prefs, cfg, out / f"B_{B:g}", args.lambda_ridge, label=f"advpo_B{B:g}",
                    gp_subset=0, world_path=args.world, prefs_path=args.prefs)
        runs[B] = _metrics_from_dir(out / f"B_{B:g}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NoStableB)
        selection = ex.select_b(runs, args.threshold)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    selection["no_stable_B"] = any(issubclass(w.category, NoStableB) for w in caught)
    selection["threshold"] = args.threshold
    selection["per_B"] = {f"{b:g}": r for b, r in selection["per_B"].items()}
    dump_json(selection, out / "sweep.json")
    for b, r in selection["per_B"].items():
        print(f"B={b:<6} slope={r['slope']:+.3e} val_proxy={r['val_proxy']:.4f} gold_at_best={r['gold_at_best']:.4f}")
    print(f"selected B={selection['selected']:g}")
    return EXIT_OK


def _metrics_from_dir(path):
    """Reload a run directory into the minimal RunMetrics the selection code reads."""
    m = load_manifest(path)
    rows = read_rows(Path(path) / m.artifacts["metrics"])
    s = m.summary
    return RunMetrics(rows=rows, best_checkpoint={"step": s["best_step"], "val_proxy": s["val_proxy_at_best"],
                                                  "gold_mean": s["gold_at_best"]})


def cmd_analyze(args) -> int:
    run_dir = Path(args.run)
    if run_dir.is_file():
        run_dir = run_dir.parent
    m = load_manifest(run_dir)
    rows = read_rows(run_dir / m.artifacts["metrics"])
    samples = read_rows(run_dir / m.artifacts["samples"])
    out = resolve_out(args.out) if args.out else run_dir
    summary = reports.analyze(rows, samples, out)
    summary["run"] = m.summary.get("label")
    summary["manifest_hash"] = m.content_hash
    dump_json(summary, out / "analysis.json")
    ci = summary["ci"]
    print(f"pearson={ci['pearson']:.4f} spearman={ci['spearman']:.4f} n={ci['n']}")
    return EXIT_OK


def cmd_compare(args) -> int:
    results = {}
    for path in args.runs:
        m = load_manifest(path)
        label = m.summary["label"]
        seed = int(m.seeds["train"])
        if seed in results.setdefault(label, {}):
            raise UsageError(f"two runs of {label!r} share seed {seed}")
        results[label][seed] = float(m.summary["gold_at_best"])
    if len(results) < 2:
        raise UsageError("compare needs runs from at least two variants")
    table = reports.compare(results, args.tie)
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "comparison.csv", table, ("variant", "opponent", "win", "tie", "lose", "n_seeds"))
    text = reports.format_table(table)
    (out / "comparison.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "run": cmd_run, "sweep-b": cmd_sweep_b, "analyze": cmd_analyze,
            "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NonFiniteEncountered as exc:
        print(f"error: {exc} {exc.diagnostics.get('step', '')}", file=sys.stderr)
        return EXIT_NONFINITE
    except DegenerateInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PessilabError, UsageError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
