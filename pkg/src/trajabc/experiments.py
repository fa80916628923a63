"""Regime x beta x seed grids (ablation table and beta sweep)."""

from __future__ import annotations

import csv
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from statistics import median
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import denormalize_boxes, stack_windows
from .metrics import aggregate, centers, per_window_metrics, predict_pixels
from .train import embed_windows, load_dataset, silhouette, train, windows_for

log = logging.getLogger(__name__)

SUMMARY_METRICS = ("ade_sq_0.5", "ade_sq_1.0", "ade_sq_1.5", "c_ade_sq_1.5", "c_fde_sq_1.5")


def score_model(model, windows, horizons: Sequence[float], L: int, seed: int) -> dict:
    """Best-of-L and single-sample metrics, endpoint spread, and embedding silhouette."""
    horizons = sorted(horizons)
    fps = windows[0].fps
    pred = predict_pixels(model, windows, L, seed)
    _, fut, acts, refs = stack_windows(windows)
    gt = np.stack([denormalize_boxes(fut[i], refs[i]) for i in range(len(windows))])
    pw = per_window_metrics(pred, gt, horizons, fps)
    best = aggregate(pw, horizons, "best-of-L", L, len(windows)).flat()
    single = aggregate(pw, horizons, "single", 1, len(windows)).flat()
    end = centers(pred[:, :, -1])  # [N, L, 2]
    spread = end.std(axis=1).max(axis=1)
    emb = embed_windows(model, windows)
    row = {k: v for k, v in best.items() if k not in ("mode", "L", "count")}
    row.update({f"single_{k}": v for k, v in single.items() if k not in ("mode", "L", "count")})
    row["endpoint_spread_pos_frac"] = float(np.mean(spread > 0))
    row["silhouette"] = silhouette(emb, acts)
    row["n_test"] = len(windows)
    return row


def run_cell(cfg: RunConfig, regime: str, beta: float, seed: int, out_dir=None) -> dict:
    row = {"regime": regime, "beta": beta, "seed": seed}
    t0 = time.perf_counter()
    try:
        cell = cfg.replace(loss={"regime": regime, "beta": beta}, run={"seed": seed})
        records, vocab = load_dataset(cell)
        res = train(cell, out_dir=out_dir, records=records, vocab=vocab)
        test_w = windows_for(cell, res.splits["test"])
        row.update(score_model(res.model, test_w, cell.data.horizon_list, cell.run.eval_l, seed))
        row["best_epoch"] = res.best_epoch
        row["status"] = "ok"
    except Exception as exc:  # grid continues; failure is recorded in the row
        log.error("cell %s/%s/%s failed: %s", regime, beta, seed, exc)
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
        row["traceback"] = traceback.format_exc()
    row["seconds"] = time.perf_counter() - t0
    return row


def _cell_job(args):
    text, regime, beta, seed, out = args
    from .config import parse_config

    return run_cell(parse_config(text), regime, beta, seed, out)


def ablate(cfg: RunConfig, betas: Sequence[float], regimes: Sequence[str], seeds: Sequence[int],
           out_dir=None, workers: int = 1) -> list[dict]:
    """Run every (regime, beta, seed) cell; ``none`` runs once per seed (beta is forced to 0)."""
    cells = []
    for regime in regimes:
        for beta in ([0.0] if regime == "none" else betas):
            for seed in seeds:
                sub = None
                if out_dir:
                    sub = str(Path(out_dir) / f"{regime}_b{beta:g}_s{seed}")
                cells.append((cfg.to_text(), regime, float(beta), int(seed), sub))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_cell_job, cells))
    else:
        rows = [_cell_job(c) for c in cells]
    if out_dir:
        write_outputs(rows, out_dir)
    return rows


def summarize(rows: Sequence[dict], metrics: Sequence[str] = SUMMARY_METRICS) -> list[dict]:
    """Median over seeds for every (regime, beta) group, in first-seen order."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r.get("status") == "ok":
            groups.setdefault((r["regime"], r["beta"]), []).append(r)
    out = []
    for (regime, beta), rs in groups.items():
        s = {"regime": regime, "beta": beta, "n_seeds": len(rs)}
        for m in list(metrics) + ["silhouette"]:
            s[m] = median(r[m] for r in rs)
        out.append(s)
    return out


def write_outputs(rows: Sequence[dict], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys and k != "traceback"]
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    summary = summarize(rows)
    (out / "ablation.txt").write_text(format_table(summary), encoding="utf-8")
    with open(out / "beta_sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["regime", "beta", "c_fde_sq_1.5", "c_ade_sq_1.5"])
        for s in summary:
            w.writerow([s["regime"], s["beta"], s["c_fde_sq_1.5"], s["c_ade_sq_1.5"]])
    (out / "ablation.json").write_text(json.dumps(rows, indent=1, default=str) + "\n", encoding="utf-8")


def format_table(summary: Sequence[dict]) -> str:
    heads = ["regime", "beta", "ADE 0.5", "ADE 1.0", "ADE 1.5", "C-ADE 1.5", "C-FDE", "silh."]
    lines = ["".join(f"{h:>11}" for h in heads)]
    for s in summary:
        vals = [s[m] for m in SUMMARY_METRICS] + [s["silhouette"]]
        lines.append(f"{s['regime']:>11}{s['beta']:>11g}" + "".join(f"{v:>11.2f}" for v in vals[:-1])
                     + f"{vals[-1]:>11.3f}")
    return "\n".join(lines) + "\n"
