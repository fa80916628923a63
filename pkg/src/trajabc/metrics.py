"""Bounding-box displacement metrics in squared pixels and in pixels.

Squared-pixel metrics average the squared error over coordinates: four box
coordinates for ADE/FDE, two center coordinates for C-ADE/C-FDE.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import TrajectoryWindow, denormalize_boxes, stack_windows

METRIC_NAMES = ("ade_sq", "c_ade_sq", "fde_sq", "c_fde_sq", "ade_px", "fde_px")


def _check(pred, gt, name):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"{name}: shape mismatch {pred.shape} vs {gt.shape}")
    if pred.shape[-2] == 0:
        raise ValueError(f"{name}: empty sequence")
    return pred, gt


def centers(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.stack([(boxes[..., 0] + boxes[..., 2]) / 2, (boxes[..., 1] + boxes[..., 3]) / 2], axis=-1)


# All metric functions accept [..., T, 4] and reduce the last two axes.

def ade_sq(pred, gt):
    pred, gt = _check(pred, gt, "ade_sq")
    return np.mean((pred - gt) ** 2, axis=(-2, -1))


def c_ade_sq(pred, gt):
    pred, gt = _check(pred, gt, "c_ade_sq")
    return np.mean((centers(pred) - centers(gt)) ** 2, axis=(-2, -1))


def fde_sq(pred, gt):
    pred, gt = _check(pred, gt, "fde_sq")
    return np.mean((pred[..., -1, :] - gt[..., -1, :]) ** 2, axis=-1)


def c_fde_sq(pred, gt):
    pred, gt = _check(pred, gt, "c_fde_sq")
    return np.mean((centers(pred[..., -1:, :]) - centers(gt[..., -1:, :])) ** 2, axis=(-2, -1))


def pixel_variants(pred, gt):
    """Mean and final-frame Euclidean center distance, in pixels."""
    pred, gt = _check(pred, gt, "pixel_variants")
    d = np.linalg.norm(centers(pred) - centers(gt), axis=-1)
    return d.mean(axis=-1), d[..., -1]


def horizon_frames(h: float, fps: float) -> int:
    return int(math.ceil(h * fps - 1e-9))


@dataclass
class MetricsReport:
    horizons: list[float]
    values: dict = field(default_factory=dict)  # {horizon: {metric: value}}
    count: int = 0
    mode: str = "best-of-L"
    L: int = 1

    def flat(self) -> dict:
        out = {}
        for h in self.horizons:
            for m in METRIC_NAMES:
                out[f"{m}_{float(h)}"] = self.values[h][m]
        out["count"] = self.count
        out["mode"] = self.mode
        out["L"] = self.L
        return out

    def to_json(self) -> str:
        return json.dumps(self.flat(), indent=2, sort_keys=False) + "\n"

    def to_table(self) -> str:
        hs = self.horizons
        h_max = hs[-1]
        heads = [f"ADE {h:g}" for h in hs] + [f"C-ADE {h_max:g}", f"C-FDE {h_max:g}",
                                              f"FDE {h_max:g}", f"ADEpx {h_max:g}", f"FDEpx {h_max:g}"]
        vals = [self.values[h]["ade_sq"] for h in hs] + [self.values[h_max][k] for k in
                                                         ("c_ade_sq", "c_fde_sq", "fde_sq", "ade_px", "fde_px")]
        width = max(10, *(len(x) for x in heads))
        line1 = "".join(f"{x:>{width}}" for x in heads)
        line2 = "".join(f"{v:>{width}.2f}" for v in vals)
        return f"# {self.mode}, L={self.L}, n={self.count}\n{line1}\n{line2}\n"


def per_window_metrics(pred_px: np.ndarray, gt_px: np.ndarray, horizons: Sequence[float], fps: float):
    """``pred_px [N, L, T, 4]``, ``gt_px [N, T, 4]`` -> {h: {metric: [N, L]}}."""
    out = {}
    gt = gt_px[:, None]
    for h in horizons:
        n = horizon_frames(h, fps)
        p, g = pred_px[:, :, :n], np.broadcast_to(gt[:, :, :n], pred_px[:, :, :n].shape)
        apx, fpx = pixel_variants(p, g)
        out[h] = {"ade_sq": ade_sq(p, g), "c_ade_sq": c_ade_sq(p, g), "fde_sq": fde_sq(p, g),
                  "c_fde_sq": c_fde_sq(p, g), "ade_px": apx, "fde_px": fpx}
    return out


def aggregate(per_window: dict, horizons: Sequence[float], mode: str, L: int, count: int) -> MetricsReport:
    values = {}
    for h in horizons:
        values[h] = {}
        for m in METRIC_NAMES:
            arr = per_window[h][m]
            chosen = arr.min(axis=1) if mode == "best-of-L" else arr[:, 0]
            values[h][m] = float(chosen.mean()) if len(chosen) else float("nan")
    return MetricsReport(list(horizons), values, count, mode, L)


def predict_pixels(model, windows: Sequence[TrajectoryWindow], L: int, seed: int) -> np.ndarray:
    from .model import chunked_predict

    obs, _, _, refs = stack_windows(windows)
    pred = chunked_predict(model, obs, L, seed)
    return np.stack([denormalize_boxes(pred[i], refs[i]) for i in range(len(windows))])


def evaluate(model, windows: Sequence[TrajectoryWindow], horizons: Sequence[float], L: int = 20,
             mode: str = "best-of-L", seed: int = 0, predictions: np.ndarray | None = None
             ) -> MetricsReport:
    """Denormalize L sampled futures per window and score them per horizon."""
    if L < 1:
        raise ValueError("L must be >= 1")
    if mode not in ("best-of-L", "single"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    horizons = sorted(float(h) for h in horizons)
    if not windows:
        raise ValueError("no windows to evaluate")
    fps = windows[0].fps
    t_pred = len(windows[0].future)
    for h in horizons:
        if horizon_frames(h, fps) > t_pred or horizon_frames(h, fps) < 1:
            raise ValueError(f"horizon {h}s needs {horizon_frames(h, fps)} frames; t_pred is {t_pred}")
    if mode == "single":
        L = 1
    if predictions is None:
        predictions = predict_pixels(model, windows, L, seed)
    predictions = predictions[:, :L]
    _, fut, _, refs = stack_windows(windows)
    gt = np.stack([denormalize_boxes(fut[i], refs[i]) for i in range(len(windows))])
    pw = per_window_metrics(predictions, gt, horizons, fps)
    return aggregate(pw, horizons, mode, L, len(windows))
