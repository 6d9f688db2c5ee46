"""Report emission: JSON summary, CSV tables and PPM overlays, all byte-stable."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


@dataclass
class EvalResult:
    """Everything measured for one explainer (one checkpoint or seed)."""

    label: str
    fidelity: dict
    counts: dict = field(default_factory=dict)
    # {"insertion": {alpha: [auc, ...]}, "deletion": {...}}
    auc: dict = field(default_factory=dict)
    # {"insertion": {alpha: mean probability curve}}
    curves: dict = field(default_factory=dict)
    counterfactuals: list = field(default_factory=list)
    overlays: list = field(default_factory=list)  # (index, state [C,H,W], masks [K,H,W])


def round9(x):
    """Round floats to 9 significant digits, recursively."""
    if isinstance(x, dict):
        return {str(k): round9(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [round9(v) for v in x]
    if isinstance(x, np.ndarray):
        return round9(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return float(f"{x:.9g}") if math.isfinite(x) else None
    return x


def fmt9(x):
    return f"{float(x):.9g}"


def mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}


def _alpha_key(alpha):
    return fmt9(alpha)


def summarize_run(res):
    auc = {kind: {_alpha_key(a): mean_std(vals) for a, vals in sorted(per.items())}
           for kind, per in sorted(res.auc.items())}
    cf = res.counterfactuals
    flips = [row["changed"] for row in cf if row.get("rank") == 0]
    return {
        "label": res.label,
        "fidelity": res.fidelity,
        "counts": res.counts,
        "auc": auc,
        "counterfactual_flip_rate": float(np.mean(flips)) if flips else None,
    }


SCALARS = ("accuracy", "precision", "recall", "f1")


def aggregate(results):
    """Mean and std across runs for every scalar metric and AUC cell."""
    agg = {m: mean_std([r.fidelity[m] for r in results]) for m in SCALARS}
    kinds = sorted({k for r in results for k in r.auc})
    for kind in kinds:
        alphas = sorted({a for r in results for a in r.auc.get(kind, {})})
        for a in alphas:
            per_run = [float(np.mean(r.auc[kind][a])) for r in results if a in r.auc.get(kind, {})]
            agg[f"{kind}_auc@{_alpha_key(a)}"] = mean_std(per_run)
    return agg


def heat_overlay(state, mask, scale=4, max_alpha=0.6):
    """RGB uint8 image: grayscale state under a yellow-to-red heat layer with alpha ~ mask."""
    state = np.asarray(state, dtype=np.float64)
    gray = state.mean(axis=0) if state.ndim == 3 else state
    m = np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0)
    base = np.repeat(np.clip(gray, 0, 1)[..., None], 3, axis=2)
    heat = np.stack([np.ones_like(m), 1.0 - m, np.zeros_like(m)], axis=2)
    alpha = (max_alpha * m)[..., None]
    rgb = base * (1 - alpha) + heat * alpha
    if scale > 1:
        rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    return np.round(rgb * 255).astype(np.uint8)


def ppm_bytes(rgb):
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def write_overlays(out_dir, index, state, masks, scale=4, pattern="{index:04d}_action{k}.ppm"):
    """One PPM per mask, named by ``pattern``; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, m in enumerate(masks):
        p = out_dir / pattern.format(index=index, k=k)
        p.write_bytes(ppm_bytes(heat_overlay(state, m, scale)))
        paths.append(p)
    return paths


def _tables_csv(results, agg):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "metric", "mean", "std", "n"])
    for res in results:
        for m in SCALARS:
            w.writerow([res.label, m, fmt9(res.fidelity[m]), "", 1])
        for kind, per in sorted(res.auc.items()):
            for a, vals in sorted(per.items()):
                s = mean_std(vals)
                w.writerow([res.label, f"{kind}_auc@{_alpha_key(a)}", fmt9(s["mean"]), fmt9(s["std"]), s["n"]])
    for name, s in agg.items():
        if s["n"]:
            w.writerow(["all", name, fmt9(s["mean"]), fmt9(s["std"]), s["n"]])
    return buf.getvalue()


def _curves_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "kind", "alpha", "x", "p_mean"])
    for res in results:
        for kind, per in sorted(res.curves.items()):
            for a, (x, p) in sorted(per.items()):
                for xi, pi in zip(x, p):
                    w.writerow([res.label, kind, _alpha_key(a), fmt9(xi), fmt9(pi)])
    return buf.getvalue()


def emit_report(results, out_dir, config=None, overlay_scale=4):
    """Write report.json, tables.csv, curves.csv and overlays/ under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    agg = aggregate(results)
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": config or {},
        "runs": [summarize_run(r) for r in results],
        "aggregate": agg,
        "curves": {r.label: {kind: {_alpha_key(a): {"x": x, "p_mean": p} for a, (x, p) in sorted(per.items())}
                             for kind, per in sorted(r.curves.items())} for r in results},
        "counterfactuals": [{"run": r.label, **row} for r in results for row in r.counterfactuals],
    }
    text = json.dumps(round9(report), sort_keys=True, indent=1, allow_nan=False) + "\n"
    (out_dir / "report.json").write_text(text, encoding="utf-8")
    (out_dir / "tables.csv").write_text(_tables_csv(results, agg), encoding="utf-8")
    (out_dir / "curves.csv").write_text(_curves_csv(results), encoding="utf-8")
    for i, res in enumerate(results):
        sub = out_dir / "overlays" if len(results) == 1 else out_dir / "overlays" / res.label
        for index, state, masks in res.overlays:
            write_overlays(sub, index, state, masks, overlay_scale)
    return out_dir / "report.json"
