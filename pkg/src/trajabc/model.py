"""CVAE trajectory predictor: LSTM encoder, Gaussian latent heads, LSTM decoder.

Coordinates are normalized boxes (see :mod:`trajabc.data`); the decoder emits
per-step deltas that are accumulated from the last observed box, so a model
with all-zero parameters predicts a stationary box.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import (ParamRegistry, ParamSpec, init_params, linear, lstm_cell, lstm_spec,
                 mlp_forward, mlp_layers, mlp_spec)

DECODER_MODES = ("forward", "bidirectional")
BOX_DIM = 4
FEATURE_DIM = 8  # box + first difference


@dataclass
class ModelConfig:
    d_h: int = 256
    d_z: int = 32
    t_obs: int = 5
    t_pred: int = 15
    decoder_mode: str = "bidirectional"
    k_bom: int = 20
    lambda_kl: float = 1.0

    def __post_init__(self):
        if self.decoder_mode not in DECODER_MODES:
            raise ValueError(f"unknown decoder mode {self.decoder_mode!r}")
        for name in ("d_h", "d_z", "t_obs", "t_pred", "k_bom"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.t_pred < 2:
            raise ValueError("t_pred must be >= 2")

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in types:
                raise ValueError(f"unknown model hyperparameter {key!r}")
            kw[key] = {"int": int, "float": float}.get(types[key], str)(val)
        return cls(**kw)

    def diff(self, other: "ModelConfig") -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name) != getattr(other, f.name)]


@dataclass
class LatentGaussian:
    mu: Tensor
    log_sigma: Tensor

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.data)


def step_features(seq: np.ndarray) -> np.ndarray:
    """``[B, T, 4]`` boxes -> ``[B, T, 8]`` (box, delta to previous step)."""
    seq = np.asarray(seq, dtype=np.float64)
    delta = np.zeros_like(seq)
    delta[:, 1:] = seq[:, 1:] - seq[:, :-1]
    return np.concatenate([seq, delta], axis=-1)


def param_spec(cfg: ModelConfig) -> list[ParamSpec]:
    d_h, d_z = cfg.d_h, cfg.d_z
    spec = []
    spec += lstm_spec("encoder.lstm", FEATURE_DIM, d_h)
    spec += lstm_spec("recognition.lstm", FEATURE_DIM, d_h)
    spec += mlp_spec("prior.mlp", [d_h, d_h, 2 * d_z])
    spec += mlp_spec("posterior.mlp", [2 * d_h, d_h, 2 * d_z])
    spec += mlp_spec("decoder.fwd.init", [d_h + d_z, d_h])
    spec += lstm_spec("decoder.fwd.lstm", BOX_DIM, d_h)
    spec += mlp_spec("decoder.fwd.out", [d_h, BOX_DIM])
    if cfg.decoder_mode == "bidirectional":
        spec += mlp_spec("decoder.goal.mlp", [d_h + d_z, d_h, BOX_DIM])
        spec += mlp_spec("decoder.bwd.init", [d_h + d_z, d_h])
        spec += lstm_spec("decoder.bwd.lstm", BOX_DIM, d_h)
        spec += mlp_spec("decoder.bwd.out", [d_h, BOX_DIM])
    return spec


ENCODER_PREFIX = "encoder."
DECODER_PREFIXES = ("decoder.", "prior.", "posterior.", "recognition.")


def reparameterize(g: LatentGaussian, noise) -> Tensor:
    """z = mu + exp(log_sigma) * noise."""
    return g.mu + ad.exp(g.log_sigma) * ad.as_tensor(noise)


def kl_gaussian(posterior: LatentGaussian, prior: LatentGaussian) -> Tensor:
    """Closed-form KL(posterior || prior) for diagonal Gaussians, summed over dims, mean over batch."""
    if posterior.mu.shape != prior.mu.shape:
        raise ShapeError("kl_gaussian", posterior.mu.shape, prior.mu.shape)
    dls = posterior.log_sigma - prior.log_sigma
    dmu = posterior.mu - prior.mu
    per_dim = (ad.scale(dls, -1.0)
               + ad.scale(ad.exp(ad.scale(dls, 2.0)) + dmu * dmu * ad.exp(ad.scale(prior.log_sigma, -2.0)), 0.5)
               - 0.5)
    total = per_dim.sum(axis=-1) if per_dim.ndim > 1 else per_dim.sum()
    return total.mean()


def bom_l2(predictions: Tensor, target) -> Tensor:
    """Best-of-many MSE: mean over batch of the min over samples of per-sample MSE.

    ``predictions`` is ``[B, L, T, 4]``; ``target`` is ``[B, T, 4]``.
    """
    if predictions.ndim != 4:
        raise ShapeError("bom_l2", predictions.shape, detail="expected [B, L, T, 4]")
    B, L, T, D = predictions.shape
    if L == 0:
        raise ValueError("bom_l2: need at least one sample (L=0)")
    target = np.asarray(ad.as_tensor(target).data)
    if target.shape != (B, T, D):
        raise ShapeError("bom_l2", predictions.shape, target.shape)
    flat = predictions.reshape(B * L, T * D)
    tgt = np.repeat(target.reshape(B, T * D), L, axis=0)
    diff = flat - tgt
    per_sample = (diff * diff).mean(axis=1).reshape(B, L)
    return ad.min_(per_sample, axis=1).mean()


def traj_loss(outputs: dict, target, lambda_kl: float = 1.0) -> Tensor:
    """BoM reconstruction plus weighted KL between recognition and prior latents."""
    if outputs.get("posterior") is None:
        raise ValueError("traj_loss needs training-mode outputs (posterior present)")
    loss = bom_l2(outputs["pred"], target)
    if lambda_kl:
        loss = loss + ad.scale(kl_gaussian(outputs["posterior"], outputs["prior"]), lambda_kl)
    return loss


class TrajectoryCVAE:
    def __init__(self, cfg: ModelConfig, params: ParamRegistry | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(param_spec(cfg), seed)

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "TrajectoryCVAE":
        reg = ParamRegistry((p.name, np.zeros(p.shape)) for p in param_spec(cfg))
        return cls(cfg, reg)

    def encoder_param_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(ENCODER_PREFIX)]

    def decoder_param_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(DECODER_PREFIXES)]

    # ------------------------------------------------------------ encoders

    def _run_lstm(self, prefix: str, seq) -> Tensor:
        seq = np.asarray(seq, dtype=np.float64)
        if seq.ndim != 3 or seq.shape[-1] != BOX_DIM:
            raise ShapeError(prefix, seq.shape, detail="expected [B, T, 4]")
        if seq.shape[1] == 0:
            raise ValueError(f"{prefix}: empty sequence (T = 0)")
        feats = step_features(seq)
        B = seq.shape[0]
        w, b = self.params[f"{prefix}.w"], self.params[f"{prefix}.b"]
        h = c = Tensor(np.zeros((B, self.cfg.d_h)))
        for t in range(seq.shape[1]):
            h, c = lstm_cell(Tensor(feats[:, t]), h, c, w, b)
        return h

    def encode(self, observed) -> Tensor:
        """Final LSTM hidden state over the observed boxes: ``[B, d_h]``."""
        return self._run_lstm("encoder.lstm", observed)

    def encode_future(self, future) -> Tensor:
        return self._run_lstm("recognition.lstm", future)

    def latent_heads(self, h: Tensor, future_enc: Tensor | None = None):
        d_z = self.cfg.d_z
        out = mlp_forward(h, mlp_layers(self.params, "prior.mlp", 2))
        prior = LatentGaussian(out[:, :d_z], out[:, d_z:])
        posterior = None
        if future_enc is not None:
            q = mlp_forward(ad.concat([h, future_enc], axis=-1),
                            mlp_layers(self.params, "posterior.mlp", 2))
            posterior = LatentGaussian(q[:, :d_z], q[:, d_z:])
        return prior, posterior

    # ------------------------------------------------------------ decoder

    def _rollout(self, name: str, ctx: Tensor, start: Tensor, steps: int, sign: float) -> list[Tensor]:
        p = self.params
        h = ad.tanh(linear(ctx, p[f"decoder.{name}.init.0.w"], p[f"decoder.{name}.init.0.b"]))
        c = Tensor(np.zeros(h.shape))
        w, b = p[f"decoder.{name}.lstm.w"], p[f"decoder.{name}.lstm.b"]
        ow, ob = p[f"decoder.{name}.out.0.w"], p[f"decoder.{name}.out.0.b"]
        pos, out = start, []
        for _ in range(steps):
            h, c = lstm_cell(pos, h, c, w, b)
            delta = linear(h, ow, ob)
            pos = pos + delta if sign > 0 else pos - delta
            out.append(pos)
        return out

    def decode(self, h: Tensor, z, last_box, t_pred: int | None = None,
               mode: str | None = None) -> Tensor:
        """Future boxes ``[N, t_pred, 4]`` from embedding ``h`` and latent ``z``."""
        t_pred = self.cfg.t_pred if t_pred is None else t_pred
        mode = self.cfg.decoder_mode if mode is None else mode
        if mode not in DECODER_MODES:
            raise ValueError(f"unknown decoder mode {mode!r}")
        if t_pred < 1:
            raise ValueError("t_pred must be >= 1")
        if mode == "bidirectional" and "decoder.goal.mlp.0.w" not in self.params:
            raise ValueError("model was built without bidirectional decoder parameters")
        last = ad.as_tensor(last_box)
        ctx = ad.concat([h, ad.as_tensor(z)], axis=-1)
        if mode == "forward":
            return ad.stack(self._rollout("fwd", ctx, last, t_pred, +1.0), axis=1)

        goal = last + mlp_forward(ctx, mlp_layers(self.params, "decoder.goal.mlp", 2))
        if t_pred == 1:
            return ad.stack([goal], axis=1)
        fwd = self._rollout("fwd", ctx, last, t_pred, +1.0)
        bwd = self._rollout("bwd", ctx, goal, t_pred - 1, -1.0)[::-1] + [goal]
        steps = []
        for t in range(t_pred):
            alpha = t / (t_pred - 1)
            if alpha == 0.0:
                steps.append(fwd[t])
            elif alpha == 1.0:
                steps.append(bwd[t])
            else:
                steps.append(ad.scale(fwd[t], 1.0 - alpha) + ad.scale(bwd[t], alpha))
        return ad.stack(steps, axis=1)

    # ------------------------------------------------------------ composite passes

    def forward_train(self, observed, future, noise) -> dict:
        """Training pass with K posterior samples per element; ``noise`` is ``[B*K, d_z]``."""
        observed = np.asarray(observed, dtype=np.float64)
        B = observed.shape[0]
        noise = np.asarray(noise, dtype=np.float64)
        K = noise.shape[0] // B
        if noise.shape != (B * K, self.cfg.d_z) or K < 1:
            raise ShapeError("forward_train", noise.shape, (B, self.cfg.d_z), "noise")
        h = self.encode(observed)
        prior, posterior = self.latent_heads(h, self.encode_future(future))
        rows = np.repeat(np.arange(B), K)
        z = reparameterize(LatentGaussian(posterior.mu[rows], posterior.log_sigma[rows]), noise)
        last = np.repeat(observed[:, -1], K, axis=0)
        pred = self.decode(h[rows], z, last)
        T = pred.shape[1]
        return {"h": h, "prior": prior, "posterior": posterior,
                "pred": pred.reshape(B, K, T, BOX_DIM)}

    def predict_multimodal(self, observed, L: int, rng_seed: int, noise=None) -> np.ndarray:
        """``L`` prior-sampled futures per input, ``[B, L, t_pred, 4]``.

        Sample ``l`` uses noise from ``default_rng([rng_seed, l])`` so the first
        ``L'`` samples are shared between runs with different ``L``.
        """
        observed = np.asarray(observed, dtype=np.float64)
        B = observed.shape[0]
        if L < 1:
            raise ValueError("L must be >= 1")
        if noise is None:
            noise = sample_noise(B, L, self.cfg.d_z, rng_seed)
        with ad.no_grad():
            h = self.encode(observed)
            prior, _ = self.latent_heads(h)
            rows = np.repeat(np.arange(B), L)
            z = reparameterize(LatentGaussian(prior.mu[rows], prior.log_sigma[rows]),
                               noise.reshape(B * L, -1))
            pred = self.decode(h[rows], z, np.repeat(observed[:, -1], L, axis=0))
        return pred.data.reshape(B, L, -1, BOX_DIM)

    def embed(self, observed) -> np.ndarray:
        with ad.no_grad():
            return self.encode(observed).data.copy()


def sample_noise(n: int, L: int, d_z: int, seed: int) -> np.ndarray:
    """Standard-normal latents ``[n, L, d_z]``; column ``l`` depends only on (seed, l)."""
    out = np.empty((n, L, d_z))
    for l in range(L):
        out[:, l] = np.random.default_rng([seed, l]).standard_normal((n, d_z))
    return out


def chunked_predict(model: TrajectoryCVAE, observed: np.ndarray, L: int, seed: int,
                    chunk: int = 256) -> np.ndarray:
    """predict_multimodal over a large array, with noise fixed per row index."""
    observed = np.asarray(observed, dtype=np.float64)
    noise = sample_noise(len(observed), L, model.cfg.d_z, seed)
    parts: Sequence[np.ndarray] = [
        model.predict_multimodal(observed[i:i + chunk], L, seed, noise=noise[i:i + chunk])
        for i in range(0, len(observed), chunk)
    ]
    if not parts:
        return np.zeros((0, L, model.cfg.t_pred, BOX_DIM))
    return np.concatenate(parts, axis=0)
