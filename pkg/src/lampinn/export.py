"""Result export: long-format CSV, JSON summary and plot-ready columns."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

CSV_COLUMNS = ("method", "task_id", "group", "seed", "epoch", "loss", "mse")
PLOT_KINDS = ("convergence", "lambda_trajectory", "layer_magnitudes", "ood_sweep")


def _stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"mean": None, "sd": None, "n": 0}
    return {"mean": float(v.mean()), "sd": float(v.std()), "n": int(v.size)}


def _unseen(records):
    return [r for r in records if r["kind"] == "unseen"]


def _methods(records):
    seen = []
    for r in records:
        if r["method"] not in seen:
            seen.append(r["method"])
    return seen


def aggregate(records) -> dict:
    """Final-MSE mean/SD per method for all tasks and per group, pooled and per seed."""
    rows = _unseen(records)
    out = {}
    for m in _methods(rows):
        mine = [r for r in rows if r["method"] == m]
        entry = {g: _stats([r["mses"][-1] for r in mine if g == "all" or r["group"] == g]) for g in ("all", "A", "B")}
        per_seed = {}
        for s in sorted({r["seed"] for r in mine}):
            sub = [r for r in mine if r["seed"] == s]
            ps = {g: _stats([r["mses"][-1] for r in sub if g == "all" or r["group"] == g]) for g in ("all", "A", "B")}
            ps["gap"] = _gap(ps)
            per_seed[str(s)] = ps
        entry["gap"] = _gap(entry)
        entry["per_seed"] = per_seed
        entry["median_seed_mean"] = float(np.median([p["all"]["mean"] for p in per_seed.values()]))
        gaps = [p["gap"] for p in per_seed.values() if p["gap"] is not None]
        entry["median_seed_gap"] = float(np.median(gaps)) if gaps else None
        out[m] = entry
    return out


def _gap(entry):
    a, b = entry["A"]["mean"], entry["B"]["mean"]
    return None if a is None or b is None else abs(a - b)


def build_summary(cfg, records, per_seed) -> dict:
    return {
        "name": cfg.name,
        "family": cfg.family,
        "config_hash": cfg.hash(),
        "seeds": list(cfg.seeds),
        "methods": aggregate(records),
        "groups": {str(s): per_seed[s]["groups"] for s in per_seed},
        "clusters": {str(s): per_seed[s]["clustering"] for s in per_seed},
        "stats": {str(s): per_seed[s]["stats"] for s in per_seed},
    }


def _order_key(r):
    from .pipeline import METHOD_ORDER

    rank = METHOD_ORDER.index(r["method"]) if r["method"] in METHOD_ORDER else len(METHOD_ORDER)
    return (r["seed"], rank, r["method"])


def write_csv(records, path) -> None:
    rows = _unseen(records)
    if not rows:
        raise ConfigurationError("no records to export")
    # stable sort keeps the unseen-task order within each (seed, method)
    rows = sorted(rows, key=_order_key)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            for epoch, (loss, mse) in enumerate(zip(r["losses"], r["mses"])):
                w.writerow([r["method"], r["task_id"], r["group"], r["seed"], epoch, repr(float(loss)), repr(float(mse))])


def read_csv(path) -> list[dict]:
    with Path(path).open() as fh:
        out = []
        for row in csv.DictReader(fh):
            row["seed"] = int(row["seed"])
            row["epoch"] = int(row["epoch"])
            row["loss"] = float(row["loss"])
            row["mse"] = float(row["mse"])
            out.append(row)
        return out


def records_from_csv(rows) -> list[dict]:
    """Rebuild minimal unseen records (losses/mses per method, task, seed) from CSV rows."""
    grouped = {}
    for row in rows:
        key = (row["method"], row["task_id"], row["seed"])
        rec = grouped.setdefault(
            key,
            {"method": row["method"], "task_id": row["task_id"], "seed": row["seed"], "group": row["group"], "kind": "unseen", "losses": [], "mses": []},
        )
        rec["losses"].append(row["loss"])
        rec["mses"].append(row["mse"])
    return list(grouped.values())


def export_results(records, summary, out_dir) -> tuple[Path, Path]:
    """Writes results.csv and summary.json; wall-clock times go to timing.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "results.csv"
    write_csv(records, csv_path)
    json_path = out_dir / "summary.json"
    json_path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    timing = [{"method": r["method"], "task_id": r["task_id"], "seed": r["seed"], "kind": r["kind"], "seconds": r.get("wall_clock")} for r in records]
    (out_dir / "timing.json").write_text(json.dumps(timing, indent=1))
    return csv_path, json_path


# plot data ---------------------------------------------------------------------


def _write_table(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _seed_curves(records, method, field_name="mses"):
    """Per seed, the task-averaged curve (truncated to the shortest trajectory)."""
    curves = []
    for s in sorted({r["seed"] for r in records if r["method"] == method}):
        trajs = [r[field_name] for r in records if r["method"] == method and r["seed"] == s]
        n = min(len(t) for t in trajs)
        curves.append(np.mean([np.asarray(t[:n], dtype=np.float64) for t in trajs], axis=0))
    n = min(len(c) for c in curves)
    return np.stack([c[:n] for c in curves])


def emit_plot_data(records, kind: str, path, extras: dict | None = None) -> list[Path]:
    """Columnar CSV files with mean and SD over seeds for one plot kind."""
    if kind not in PLOT_KINDS:
        raise ConfigurationError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    path = Path(path)
    written = []
    if kind == "convergence":
        rows = _unseen(records)
        for m in _methods(rows):
            c = _seed_curves(rows, m)
            p = path / f"convergence_{m}.csv"
            _write_table(p, ("epoch", "mean_mse", "sd_mse"), [(e, c[:, e].mean(), c[:, e].std()) for e in range(c.shape[1])])
            written.append(p)
    elif kind == "lambda_trajectory":
        rows = [r for r in _unseen(records) if r["method"] == "lam" and r.get("lambdas")]
        by_k = {}
        for r in rows:
            by_k.setdefault(len(r["lambdas"][0]), []).append(r)
        for k, group in sorted(by_k.items()):
            n = min(len(r["lambdas"]) for r in group)
            lam = np.mean([np.asarray(r["lambdas"][:n]) for r in group], axis=0).reshape(n, k)
            p = path / ("lambda_trajectory.csv" if len(by_k) == 1 else f"lambda_trajectory_k{k}.csv")
            header = ("epoch",) + tuple(f"lambda_{j + 1}" for j in range(k))
            _write_table(p, header, [(e, *lam[e]) for e in range(n)])
            written.append(p)
    elif kind == "layer_magnitudes":
        mags = (extras or {}).get("layer_magnitudes", {})
        rows = []
        for name in sorted({n for per in mags.values() for n in per}):
            arr = np.array([mags[s][name] for s in sorted(mags) if name in mags[s]], dtype=np.float64)
            for layer in range(arr.shape[1]):
                rows.append((name, layer, arr[:, layer].mean(), arr[:, layer].std()))
        p = path / "layer_magnitudes.csv"
        _write_table(p, ("net", "layer", "mean_magnitude", "sd_magnitude"), rows)
        written.append(p)
    else:
        ood = [r for r in records if r["kind"].startswith("ood:")]
        rows = []
        for scale in sorted({int(r["kind"].split(":")[1]) for r in ood}):
            sub = [r for r in ood if r["kind"] == f"ood:{scale}"]
            for m in _methods(sub):
                per_seed = [
                    np.mean([r["mses"][-1] for r in sub if r["method"] == m and r["seed"] == s])
                    for s in sorted({r["seed"] for r in sub if r["method"] == m})
                ]
                rows.append((scale, m, float(np.mean(per_seed)), float(np.std(per_seed))))
        p = path / "ood_sweep.csv"
        _write_table(p, ("scale", "method", "mean_mse", "sd_mse"), rows)
        written.append(p)
    return written


def emit_all_plot_data(records, per_seed, path) -> list[Path]:
    extras = {"layer_magnitudes": {str(s): v["layer_magnitudes"] for s, v in per_seed.items()}}
    out = []
    for kind in PLOT_KINDS:
        out += emit_plot_data(records, kind, path, extras)
    return out
