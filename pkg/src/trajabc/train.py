"""Training loop for the four loss regimes and the experiment helpers built on it."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .config import RunConfig
from .contrastive import (ContrastiveBatch, action_contrastive_loss, augment_anchor,
                          combined_loss, simclr_loss, synth_samples)
from .data import (GenConfig, SplitSpec, TrajectoryRecord, TrajectoryWindow, build_windows,
                   gen_synthetic, make_batches, read_jsonl, read_vocab, split_records,
                   stack_windows)
from .metrics import evaluate
from .model import ModelConfig, TrajectoryCVAE, traj_loss
from .nn import AdamState, ParamRegistry, adam_step, clip_grad_norm, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.bin"
HPARAMS = "checkpoint.hparams"


@dataclass
class StepReport:
    epoch: int
    step: int
    l_traj: float
    l_con: float
    l_final: float
    beta: float
    b_eff: int
    wall_time: float = 0.0

    def log_dict(self) -> dict:
        # wall time is kept out of the persisted log so reruns compare byte-for-byte
        d = asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class TrainResult:
    model: TrajectoryCVAE
    reports: list[StepReport]
    val_history: list[float]
    best_epoch: int
    splits: dict[str, list[TrajectoryRecord]]
    vocab: list[str]
    warnings: list[str] = field(default_factory=list)


# ---------------------------------------------------------------- data loading

def load_dataset(cfg: RunConfig) -> tuple[list[TrajectoryRecord], list[str]]:
    d = cfg.data
    if d.path:
        vocab = read_vocab(d.vocab) if d.vocab else None
        records = read_jsonl(d.path, vocab)
        if vocab is None:
            vocab = _vocab_from_first_use(d.path)
        return records, vocab
    gen = GenConfig(n_records=d.n_records, actions=tuple(d.action_list), fps=d.fps,
                    frame_range=(d.frame_min, d.frame_max), arena=(d.arena_w, d.arena_h),
                    seed=d.gen_seed)
    return gen_synthetic(gen), list(gen.actions)


def _vocab_from_first_use(path) -> list[str]:
    names: dict[str, None] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                for a in json.loads(line)["actions"]:
                    names.setdefault(a, None)
    return list(names)


def split_dataset(cfg: RunConfig, records) -> dict[str, list[TrajectoryRecord]]:
    d = cfg.data
    spec = SplitSpec(train=1.0 - d.val_frac - d.test_frac, val=d.val_frac, test=d.test_frac,
                     seed=d.split_seed)
    return split_records(records, spec)


def windows_for(cfg: RunConfig, records) -> list[TrajectoryWindow]:
    return build_windows(records, cfg.data.t_obs, cfg.data.t_pred, cfg.data.stride)


# ---------------------------------------------------------------- checkpoint IO

def save_model(model: TrajectoryCVAE, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / CHECKPOINT, model.params)
    (out / HPARAMS).write_text(model.cfg.to_text(), encoding="utf-8")
    return out / CHECKPOINT


def load_model(path) -> TrajectoryCVAE:
    """Load ``checkpoint.bin`` (or a run directory containing it) plus its hparams."""
    path = Path(path)
    ckpt = path / CHECKPOINT if path.is_dir() else path
    hp = ckpt.with_suffix(".hparams")
    cfg = ModelConfig.from_text(hp.read_text(encoding="utf-8"))
    model = TrajectoryCVAE.zeros(cfg)
    model.params.load_state(load_checkpoint(ckpt))
    return model


# ---------------------------------------------------------------- one step

def contrastive_term(model: TrajectoryCVAE, cfg: RunConfig, h: Tensor, obs: np.ndarray,
                     acts: np.ndarray, rng_aug, rng_syn, inject: bool,
                     generator: TrajectoryCVAE | None = None):
    """Contrastive loss for one batch; returns ``(loss Tensor, b_eff)``."""
    lw = cfg.loss
    aug = augment_anchor(obs, lw.epsilon_sigma, rng_aug)
    h_aug = model.encode(aug)
    if lw.regime == "simclr":
        batch = ContrastiveBatch.build(h, acts, augmented=h_aug)
        return simclr_loss(batch, lw.tau), len(acts)
    h_syn, src = None, None
    if inject:
        gen = generator or model
        synth = synth_samples(gen, obs, acts, lw.l_synth, rng_syn)
        if synth:
            segs = np.stack([s for s, _, _ in synth])
            src = np.array([j for _, j, _ in synth])
            h_syn = model.encode(segs)
    batch = ContrastiveBatch.build(h, acts, augmented=h_aug, synthetic=h_syn, synth_source=src)
    res = action_contrastive_loss(batch, lw.tau, normalize=lw.normalize,
                                  supcon_denominator=lw.supcon_denominator)
    return res.loss, res.b_eff


def train(cfg: RunConfig, out_dir=None, records=None, vocab=None,
          on_step: Callable[[StepReport], None] | None = None) -> TrainResult:
    """Train one model; writes checkpoint, hparams, train_log.jsonl, split.json when ``out_dir`` is set."""
    cfg.validate()
    if records is None:
        records, vocab = load_dataset(cfg)
    splits = split_dataset(cfg, records)
    train_w = windows_for(cfg, splits["train"])
    val_w = windows_for(cfg, splits["val"])
    if not train_w:
        raise ValueError("no training windows (records shorter than t_obs + t_pred?)")
    obs_all, fut_all, act_all, _ = stack_windows(train_w)

    mcfg = cfg.model_config()
    seed = cfg.run.seed
    model = TrajectoryCVAE(mcfg, seed=seed)
    opt = AdamState(lr=cfg.optim.lr)
    streams = np.random.SeedSequence(seed).spawn(4)
    rng_latent, rng_aug, rng_syn = (np.random.default_rng(s) for s in streams[:3])
    batch_seed = int(streams[3].generate_state(1)[0])

    regime = cfg.loss.regime
    beta = cfg.loss.beta
    contrastive = regime != "none"
    warnings: list[str] = []
    if regime in ("abc", "abc_plus") and len(np.unique(act_all)) < 2:
        msg = "training data has a single action class; the action contrastive term contributes 0"
        warnings.append(msg)
        log.warning(msg)
    generator = load_model(cfg.loss.generator_checkpoint) if cfg.loss.generator_checkpoint else None

    out = Path(out_dir) if out_dir else None
    log_fh = timing_fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w", encoding="utf-8")
        timing_fh = open(out / "timing.log", "w", encoding="utf-8")
        (out / "split.json").write_text(json.dumps(
            {k: [r.id for r in v] for k, v in splits.items()}) + "\n", encoding="utf-8")
        cfg.write(out / "config.ini")

    reports: list[StepReport] = []
    val_hist: list[float] = []
    best_val, best_state, best_epoch = np.inf, model.params.state(), -1
    K = mcfg.k_bom
    step = 0
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.optim.epochs):
            inject = regime == "abc_plus" and (generator is not None or epoch >= cfg.loss.warmup_epochs)
            for idx in make_batches(act_all, cfg.optim.batch_size, batch_seed, cfg.optim.balance,
                                    training=True, epoch=epoch):
                obs, fut, acts = obs_all[idx], fut_all[idx], act_all[idx]
                noise = rng_latent.standard_normal((len(idx) * K, mcfg.d_z))
                outputs = model.forward_train(obs, fut, noise)
                l_traj = traj_loss(outputs, fut, mcfg.lambda_kl)
                if contrastive:
                    l_con, b_eff = contrastive_term(model, cfg, outputs["h"], obs, acts,
                                                    rng_aug, rng_syn, inject, generator)
                else:
                    l_con, b_eff = Tensor(0.0), 0
                l_final = combined_loss(l_traj, l_con, beta) if contrastive else l_traj
                if not np.isfinite(l_final.item()):
                    raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
                model.params.zero_grad()
                ad.backward(l_final)
                if cfg.optim.max_grad_norm > 0:
                    clip_grad_norm(model.params, cfg.optim.max_grad_norm)
                _fill_missing_grads(model.params)
                adam_step(model.params, opt)
                rep = StepReport(epoch, step, l_traj.item(), l_con.item(), l_final.item(), beta,
                                 b_eff, time.perf_counter() - t0)
                reports.append(rep)
                if log_fh:
                    log_fh.write(json.dumps(rep.log_dict()) + "\n")
                    timing_fh.write(f"{epoch}\t{step}\t{rep.wall_time:.3f}\n")
                if on_step:
                    on_step(rep)
                step += 1
            if val_w:
                rep_val = evaluate(model, val_w, [cfg.data.horizon_list[-1]], L=cfg.run.val_l,
                                   seed=seed)
                v = rep_val.values[rep_val.horizons[-1]]["ade_sq"]
            else:
                v = float(np.mean([r.l_traj for r in reports if r.epoch == epoch]))
            val_hist.append(v)
            if log_fh:
                log_fh.write(json.dumps({"epoch": epoch, "val_ade_sq": v}) + "\n")
            if v < best_val:
                best_val, best_state, best_epoch = v, model.params.state(), epoch
    finally:
        if log_fh:
            log_fh.close()
            timing_fh.close()
    model.params.load_state(best_state)
    if out:
        save_model(model, out)
    return TrainResult(model, reports, val_hist, best_epoch, splits, list(vocab or []), warnings)


def _fill_missing_grads(reg: ParamRegistry) -> None:
    # parameters not on this step's path (e.g. bidirectional heads under t_pred=1) get zero grads
    for _, t in reg.items():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------- embeddings

def embed_windows(model: TrajectoryCVAE, windows: Sequence[TrajectoryWindow], chunk: int = 512) -> np.ndarray:
    obs = stack_windows(windows)[0]
    return np.concatenate([model.embed(obs[i:i + chunk]) for i in range(0, len(obs), chunk)], axis=0)


def silhouette(embeddings: np.ndarray, labels) -> float:
    from sklearn.metrics import silhouette_score

    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        return float("nan")
    return float(silhouette_score(embeddings, labels, metric="euclidean"))
