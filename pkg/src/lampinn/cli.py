"""Command-line entry point.

Each subcommand runs the pipeline up to its own stage; earlier stages are
reused from the output directory when they already exist there.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import PRESETS, ExperimentConfig, preset
from .errors import LamPinnError
from .export import PLOT_KINDS, emit_plot_data
from . import pipeline as pl

STAGES = ("doe", "preprocess", "cluster", "train", "transfer", "baseline", "stats", "report", "plotdata")


def _config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise SystemExit("use either --config or --preset, not both")
    cfg = ExperimentConfig.load(args.config) if args.config else preset(args.preset or "helmholtz-desk")
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.parallel is not None:
        changes["parallel"] = args.parallel
    return cfg.replace(**changes) if changes else cfg


def _emit(doc) -> None:
    print(json.dumps(doc, indent=1, sort_keys=True, default=str))


def _per_seed(cfg, args, upto: str):
    root = pl.output_root(cfg, args.out)
    sets = pl.stage_doe(cfg, root)
    ctx = pl.make_context(cfg)
    out = {}
    for seed in cfg.seeds:
        sroot = root / f"seed-{seed}"
        ref = pl.stage_pretrain(cfg, ctx, seed, sroot)
        metrics = pl.stage_preprocess(cfg, ctx, seed, ref, sets.training, sroot)
        entry = {"reference": str(sroot / "reference.ckpt"), "preprocess": str(sroot / "preprocess.json")}
        if upto != "preprocess":
            _, clustering, _ = pl.stage_cluster(cfg, seed, sets.training, metrics, sroot)
            entry["k"] = clustering.k
            entry["assignments"] = clustering.assignments.tolist()
            if upto != "cluster":
                lam = pl.stage_train(cfg, ctx, seed, ref, sets.training, clustering, sroot)
                entry["checkpoint"] = str(sroot / "lam.ckpt")
                models = {"lam": lam, "reference": ref}
                if upto == "transfer":
                    recs = pl.stage_transfers(cfg, ctx, seed, ["lam"], sets.unseen, models, "unseen", sroot)
                    entry["final_mse"] = {r["task_id"]: r["mses"][-1] for r in recs}
                elif upto == "baseline":
                    if "maml" in cfg.baselines:
                        models["maml"] = pl.stage_maml(cfg, ctx, seed, sets.training, sroot)
                    methods = [m for m in pl.METHOD_ORDER if m in cfg.baselines]
                    recs = pl.stage_transfers(cfg, ctx, seed, methods, sets.unseen, models, "unseen", sroot)
                    entry["final_mse"] = {f"{r['method']}:{r['task_id']}": r["mses"][-1] for r in recs}
        out[seed] = entry
    return root, out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lampinn", description="Modular PINN transfer benchmark harness")
    parser.add_argument("command", choices=STAGES)
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="named preset (default helmholtz-desk)")
    parser.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    parser.add_argument("--out", help=f"output root (else ${pl.OUT_ENV}, else the config's out_dir)")
    parser.add_argument("--parallel", type=int, help="worker threads for independent task runs")
    parser.add_argument("--kind", choices=PLOT_KINDS, action="append", help="plot kind(s) for plotdata")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    try:
        cfg = _config(args)
        if args.command == "doe":
            root = pl.output_root(cfg, args.out)
            sets = pl.stage_doe(cfg, root)
            _emit({"root": str(root), "training": len(sets.training), "unseen": len(sets.unseen),
                   "ood": {s: len(t) for s, t in sets.ood.items()}})
        elif args.command in ("preprocess", "cluster", "train", "transfer", "baseline"):
            root, out = _per_seed(cfg, args, args.command)
            _emit({"root": str(root), "seeds": out})
        else:
            result = pl.run_pipeline(cfg, args.out)
            if args.command == "stats":
                _emit(result.summary["stats"])
            elif args.command == "report":
                _emit({"root": str(result.root), "methods": {
                    m: {g: e[g] for g in ("all", "A", "B")} for m, e in result.summary["methods"].items()}})
            else:
                extras = {"layer_magnitudes": result.layer_magnitudes}
                files = []
                for kind in args.kind or PLOT_KINDS:
                    files += emit_plot_data(result.records, kind, result.root / "plots", extras)
                _emit({"files": [str(f) for f in files]})
    except pl.PipelineError as exc:
        print(f"error: {exc} (failed stage: {exc.stage})", file=sys.stderr)
        return 2
    except LamPinnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
