"""Trajectory records, JSONL IO, windowing, normalization, splits, batching, and
a kinematic generator for action-labelled synthetic pedestrian tracks."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PLACEHOLDER_ACTION = -1


class DataError(ValueError):
    pass


@dataclass
class TrajectoryRecord:
    id: str
    fps: float
    boxes: np.ndarray  # [n, 4] pixels (x1, y1, x2, y2)
    actions: np.ndarray  # [n] class ids; PLACEHOLDER_ACTION when unknown

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.actions = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        self.validate()

    def validate(self) -> None:
        if not self.fps > 0:
            raise DataError(f"record {self.id!r}: fps must be > 0")
        n = len(self.boxes)
        if n < 1:
            raise DataError(f"record {self.id!r}: no frames")
        if len(self.actions) != n:
            raise DataError(f"record {self.id!r}: {n} boxes but {len(self.actions)} actions")
        if not np.all(np.isfinite(self.boxes)):
            raise DataError(f"record {self.id!r}: non-finite coordinates")
        bad = np.flatnonzero((self.boxes[:, 0] >= self.boxes[:, 2]) | (self.boxes[:, 1] >= self.boxes[:, 3]))
        if len(bad):
            raise DataError(f"record {self.id!r}: degenerate box at frame {int(bad[0])}")

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class TrajectoryWindow:
    record_id: str
    start: int
    observed: np.ndarray  # [t_obs, 4]
    future: np.ndarray  # [t_pred, 4]
    action: int
    norm_ref: np.ndarray  # last observed raw box
    fps: float
    normalized: bool = False

    @property
    def window_id(self) -> str:
        return f"{self.record_id}:{self.start}"


@dataclass
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0
    ids: dict = field(default_factory=dict)  # explicit {split: [record ids]} overrides fractions

    def __post_init__(self):
        if not self.ids and abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


# ---------------------------------------------------------------- vocabulary / IO

def read_vocab(path) -> list[str]:
    names = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(set(names)) != len(names):
        raise DataError(f"{path}: duplicate action names")
    return names


def write_vocab(path, names: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def read_jsonl(path, vocab: Sequence[str] | None = None, strict_actions: bool = True
               ) -> list[TrajectoryRecord]:
    """Parse one record per line.

    Action names are mapped through ``vocab`` (line order = class id).  Names
    outside the vocabulary raise unless ``strict_actions`` is false, in which
    case they become ``PLACEHOLDER_ACTION`` (inference never reads labels).
    """
    index = {n: k for k, n in enumerate(vocab)} if vocab is not None else {}
    grow = vocab is None
    records, seen, errors = [], set(), []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rid = str(obj["id"])
                acts = []
                for name in obj["actions"]:
                    if name not in index:
                        if grow:
                            index[name] = len(index)
                        elif strict_actions:
                            raise DataError(f"unknown action {name!r}")
                        else:
                            acts.append(PLACEHOLDER_ACTION)
                            continue
                    acts.append(index[name])
                rec = TrajectoryRecord(rid, float(obj["fps"]), np.asarray(obj["boxes"], dtype=float), acts)
            except (KeyError, TypeError, ValueError) as exc:
                errors.append(f"line {lineno}: {exc}")
                continue
            if rid in seen:
                errors.append(f"line {lineno}: duplicate record id {rid!r}")
                continue
            seen.add(rid)
            records.append(rec)
    if errors:
        raise DataError(f"{path}: " + "; ".join(errors))
    return records


def write_jsonl(path, records: Sequence[TrajectoryRecord], vocab: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {"id": r.id, "fps": r.fps, "boxes": r.boxes.tolist(),
                   "actions": [vocab[a] if a >= 0 else "unknown" for a in r.actions]}
            fh.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------- windows

def majority_action(actions: np.ndarray) -> int:
    counts = Counter(int(a) for a in actions)
    best = max(counts.values())
    return min(a for a, c in counts.items() if c == best)


def extract_windows(record: TrajectoryRecord, t_obs: int, t_pred: int, stride: int = 1
                    ) -> list[TrajectoryWindow]:
    """All windows at offsets 0, stride, 2*stride, ... that fit in the record (raw pixels)."""
    if t_obs < 1 or t_pred < 1 or stride < 1:
        raise ValueError("t_obs, t_pred and stride must be >= 1")
    out = []
    span = t_obs + t_pred
    for s in range(0, len(record) - span + 1, stride):
        obs = record.boxes[s:s + t_obs].copy()
        out.append(TrajectoryWindow(record.id, s, obs, record.boxes[s + t_obs:s + span].copy(),
                                    majority_action(record.actions[s:s + t_obs]), obs[-1].copy(),
                                    record.fps))
    return out


def _scale_of(ref: np.ndarray) -> np.ndarray:
    w, h = ref[2] - ref[0], ref[3] - ref[1]
    if not (w > 0 and h > 0):
        raise DataError(f"zero-area reference box {ref.tolist()}")
    return np.array([w, h, w, h])


def normalize_boxes(boxes: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return (np.asarray(boxes, dtype=np.float64) - ref) / _scale_of(ref)


def denormalize_boxes(boxes: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return np.asarray(boxes, dtype=np.float64) * _scale_of(ref) + ref


def normalize(window: TrajectoryWindow) -> TrajectoryWindow:
    """Express boxes relative to the last observed box, in units of its width/height."""
    if window.normalized:
        return window
    ref = window.norm_ref
    return TrajectoryWindow(window.record_id, window.start, normalize_boxes(window.observed, ref),
                            normalize_boxes(window.future, ref), window.action, ref.copy(),
                            window.fps, True)


def denormalize(window: TrajectoryWindow) -> TrajectoryWindow:
    if not window.normalized:
        return window
    ref = window.norm_ref
    return TrajectoryWindow(window.record_id, window.start, denormalize_boxes(window.observed, ref),
                            denormalize_boxes(window.future, ref), window.action, ref.copy(),
                            window.fps, False)


def renormalize_segment(seg: np.ndarray, min_extent: float = 1e-3) -> np.ndarray:
    """Re-express a normalized segment relative to its own final box.

    A normalized box ``b`` has raw width ``W_ref * (1 + b[2] - b[0])``; dividing
    by that width moves the segment into the frame of its last box.
    """
    seg = np.asarray(seg, dtype=np.float64)
    last = seg[-1]
    w = max(1.0 + last[2] - last[0], min_extent)
    h = max(1.0 + last[3] - last[1], min_extent)
    return (seg - last) / np.array([w, h, w, h])


def build_windows(records: Sequence[TrajectoryRecord], t_obs: int, t_pred: int,
                  stride: int = 1) -> list[TrajectoryWindow]:
    return [normalize(w) for r in records for w in extract_windows(r, t_obs, t_pred, stride)]


def stack_windows(windows: Sequence[TrajectoryWindow]):
    """Arrays ``(observed [N,t_obs,4], future [N,t_pred,4], actions [N], refs [N,4])``."""
    obs = np.stack([w.observed for w in windows])
    fut = np.stack([w.future for w in windows])
    acts = np.array([w.action for w in windows], dtype=np.int64)
    refs = np.stack([w.norm_ref for w in windows])
    return obs, fut, acts, refs


# ---------------------------------------------------------------- splits / batches

def split_records(records: Sequence[TrajectoryRecord], spec: SplitSpec) -> dict[str, list[TrajectoryRecord]]:
    """Partition records by id into train/val/test."""
    by_id = {r.id: r for r in records}
    if spec.ids:
        out = {}
        assigned: set[str] = set()
        for name in ("train", "val", "test"):
            ids = list(spec.ids.get(name, []))
            if assigned.intersection(ids):
                raise DataError(f"record ids appear in more than one split: {sorted(assigned.intersection(ids))[:3]}")
            assigned.update(ids)
            out[name] = [by_id[i] for i in ids if i in by_id]
        return out
    ids = sorted(by_id)
    order = np.random.default_rng(spec.seed).permutation(len(ids))
    n = len(ids)
    n_train = int(round(spec.train * n))
    n_val = int(round(spec.val * n))
    chunks = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
              "test": order[n_train + n_val:]}
    return {k: [by_id[ids[i]] for i in sorted(v)] for k, v in chunks.items()}


def make_batches(actions: Sequence[int], batch_size: int, seed: int, balance: bool = True,
                 training: bool = True, epoch: int = 0) -> Iterator[np.ndarray]:
    """Yield index arrays over ``len(actions)`` windows for one epoch.

    With ``balance`` every class is spread evenly through the epoch order
    (stratified jitter), so each batch sees several classes whenever the class
    counts allow it.  Training mode drops the final short batch.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    actions = np.asarray(actions)
    n = len(actions)
    rng = np.random.default_rng([seed, epoch])
    if balance and n:
        keys = np.empty(n)
        for a in np.unique(actions):
            members = np.flatnonzero(actions == a)
            perm = rng.permutation(len(members))
            keys[members[perm]] = (np.arange(len(members)) + rng.uniform(0.0, 1.0, len(members))) / len(members)
        order = np.argsort(keys, kind="stable")
        # interleaved order, then shuffle whole batches so their sequence varies per epoch
        batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
        full = [b for b in batches if len(b) == batch_size]
        short = [b for b in batches if len(b) < batch_size]
        full = [full[k] for k in rng.permutation(len(full))]
        batches = full + ([] if training else short)
    else:
        order = rng.permutation(n)
        batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
        if training:
            batches = [b for b in batches if len(b) == batch_size]
    yield from batches


# ---------------------------------------------------------------- synthetic generator

KINEMATIC_CLASSES = ("standing", "walking", "running", "bending", "turning_walk")


@dataclass
class GenConfig:
    n_records: int = 1000
    actions: tuple[str, ...] = ("standing", "walking", "running")
    mixture: tuple[float, ...] | None = None
    fps: float = 10.0
    frame_range: tuple[int, int] = (20, 40)
    arena: tuple[float, float] = (1920.0, 1080.0)
    seed: int = 0
    jitter: float = 0.5

    def __post_init__(self):
        self.actions = tuple(self.actions)
        if len(self.actions) < 2:
            raise ValueError("need at least 2 action classes")
        unknown = [a for a in self.actions if a not in KINEMATIC_CLASSES]
        if unknown:
            raise ValueError(f"no kinematic model for {unknown}; choose from {KINEMATIC_CLASSES}")
        if self.mixture is not None:
            self.mixture = tuple(float(m) for m in self.mixture)
            if len(self.mixture) != len(self.actions) or abs(sum(self.mixture) - 1) > 1e-9:
                raise ValueError("mixture must give one fraction per action, summing to 1")


def class_counts(n: int, mixture: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` records over the mixture."""
    raw = [n * m for m in mixture]
    counts = [math.floor(r + 1e-9) for r in raw]
    rest = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[:rest]:
        counts[k] += 1
    return counts


def _centers(kind: str, n: int, rng: np.random.Generator, jitter: float):
    """Center path [n, 2] and per-frame height factor [n] for one action class."""
    t = np.arange(n, dtype=np.float64)
    height = np.ones(n)
    heading = rng.uniform(-np.pi, np.pi)
    if kind == "standing":
        path = np.zeros((n, 2))
    elif kind in ("walking", "running"):
        lo, hi = (2.0, 4.0) if kind == "walking" else (6.0, 10.0)
        v = rng.uniform(lo, hi) * np.array([np.cos(heading), np.sin(heading)])
        path = t[:, None] * v
    elif kind == "turning_walk":
        speed = rng.uniform(2.0, 4.0)
        rate = rng.choice([-1.0, 1.0]) * rng.uniform(0.03, 0.1)
        ang = heading + rate * t
        step = speed * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        path = np.vstack([np.zeros((1, 2)), np.cumsum(step[:-1], axis=0)])
    elif kind == "bending":
        path = np.zeros((n, 2))
        shrink = rng.uniform(0.1, 0.3)
        onset = int(rng.integers(0, max(1, n // 3)))
        dur = max(2, int(rng.integers(max(2, n // 4), max(3, n // 2 + 1))))
        frac = np.clip((t - onset) / dur, 0.0, 1.0)
        height = 1.0 - shrink * frac
    else:  # pragma: no cover - guarded by GenConfig
        raise ValueError(kind)
    path = path + rng.normal(0.0, jitter, size=path.shape)
    return path, height


def _record(idx: int, kind: str, action_id: int, cfg: GenConfig) -> TrajectoryRecord:
    rng = np.random.default_rng([cfg.seed, idx])
    lo, hi = cfg.frame_range
    n = int(rng.integers(lo, hi + 1))
    W, H = cfg.arena
    bw = rng.uniform(30.0, 80.0)
    bh = bw * rng.uniform(2.0, 2.8)
    path, hfac = _centers(kind, n, rng, cfg.jitter)
    # start so that the whole path stays inside the arena where possible
    span_lo = path.min(axis=0)
    span_hi = path.max(axis=0)
    x_lo, x_hi = bw / 2 - span_lo[0], W - bw / 2 - span_hi[0]
    y_lo, y_hi = bh / 2 - span_lo[1], H - bh / 2 - span_hi[1]
    cx0 = rng.uniform(x_lo, x_hi) if x_hi > x_lo else W / 2
    cy0 = rng.uniform(y_lo, y_hi) if y_hi > y_lo else H / 2
    cx = cx0 + path[:, 0]
    cy = cy0 + path[:, 1]
    heights = bh * hfac
    bottom = cy + bh / 2  # feet stay on the ground while bending
    boxes = np.stack([cx - bw / 2, bottom - heights, cx + bw / 2, bottom], axis=1)
    boxes = _clamp(boxes, W, H)
    return TrajectoryRecord(f"syn{idx:05d}", cfg.fps, boxes, np.full(n, action_id))


def _clamp(boxes: np.ndarray, W: float, H: float) -> np.ndarray:
    """Shift boxes (keeping their size) so they lie inside the arena."""
    out = boxes.copy()
    for lo, hi, lim in ((0, 2, W), (1, 3, H)):
        shift = np.where(out[:, lo] < 0, -out[:, lo], 0.0)
        shift = np.where(out[:, hi] + shift > lim, lim - out[:, hi], shift)
        out[:, lo] += shift
        out[:, hi] += shift
        out[:, lo] = np.maximum(out[:, lo], 0.0)
        out[:, hi] = np.minimum(out[:, hi], lim)
    return out


def gen_synthetic(cfg: GenConfig) -> list[TrajectoryRecord]:
    """Deterministic action-labelled records; per-record RNG derived from (seed, index)."""
    mixture = cfg.mixture or tuple(1.0 / len(cfg.actions) for _ in cfg.actions)
    counts = class_counts(cfg.n_records, mixture)
    labels = np.concatenate([np.full(c, k) for k, c in enumerate(counts)]).astype(int)
    labels = np.random.default_rng([cfg.seed, 1 << 30]).permutation(labels)
    return [_record(i, cfg.actions[a], int(a), cfg) for i, a in enumerate(labels)]


def class_histogram(records: Sequence[TrajectoryRecord], vocab: Sequence[str]) -> dict[str, int]:
    hist = {name: 0 for name in vocab}
    for r in records:
        hist[vocab[majority_action(r.actions)]] += 1
    return hist
