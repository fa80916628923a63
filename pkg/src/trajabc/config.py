"""Sectioned key=value run configuration with every default embedded."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .contrastive import LossWeights
from .model import ModelConfig

REGIMES = ("none", "simclr", "abc", "abc_plus")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    path: str = ""  # JSONL; empty -> generate synthetic records
    vocab: str = ""
    n_records: int = 1000
    actions: str = "standing,walking,running"
    gen_seed: int = 0
    fps: float = 10.0
    frame_min: int = 20
    frame_max: int = 40
    arena_w: float = 1920.0
    arena_h: float = 1080.0
    t_obs: int = 5
    t_pred: int = 15
    stride: int = 1
    horizons: str = "0.5,1.0,1.5"
    val_frac: float = 0.1
    test_frac: float = 0.1
    split_seed: int = 0

    @property
    def horizon_list(self) -> list[float]:
        return [float(h) for h in self.horizons.split(",") if h.strip()]

    @property
    def action_list(self) -> list[str]:
        return [a.strip() for a in self.actions.split(",") if a.strip()]


@dataclass
class ModelSection:
    d_h: int = 256
    d_z: int = 32
    decoder_mode: str = "bidirectional"
    k_bom: int = 20
    lambda_kl: float = 1.0


@dataclass
class LossSection:
    regime: str = "abc_plus"
    beta: float = 0.75
    tau: float = 0.1
    epsilon_sigma: float = 0.01
    l_synth: int = 2
    normalize: bool = False
    supcon_denominator: bool = False
    warmup_epochs: int = 1
    generator_checkpoint: str = ""


@dataclass
class OptimSection:
    lr: float = 0.001
    batch_size: int = 128
    epochs: int = 50
    max_grad_norm: float = 0.0  # 0 disables clipping
    balance: bool = True


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs/default"
    eval_l: int = 20
    val_l: int = 5


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    run: RunSection = field(default_factory=RunSection)

    SECTIONS = ("data", "model", "loss", "optim", "run")

    def validate(self) -> "RunConfig":
        if self.loss.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.loss.regime!r}; choose from {REGIMES}")
        if self.loss.regime == "none":
            self.loss.beta = 0.0
        if self.loss.regime == "abc_plus" and self.loss.l_synth < 1:
            raise ConfigError("regime abc_plus requires l_synth >= 1")
        if self.optim.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.data.val_frac + self.data.test_frac >= 1:
            raise ConfigError("val_frac + test_frac must be < 1")
        try:
            self.model_config()
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(d_h=m.d_h, d_z=m.d_z, t_obs=self.data.t_obs, t_pred=self.data.t_pred,
                           decoder_mode=m.decoder_mode, k_bom=m.k_bom, lambda_kl=m.lambda_kl)

    def loss_weights(self) -> LossWeights:
        l = self.loss
        return LossWeights(beta=l.beta, tau=l.tau, epsilon_sigma=l.epsilon_sigma, L_synth=l.l_synth)

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides: ``replace(loss={"regime": "abc"})``."""
        kw = {}
        for name in self.SECTIONS:
            sec = getattr(self, name)
            kw[name] = dataclasses.replace(sec, **sections.get(name, {}))
        return RunConfig(**kw).validate()

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        for name in self.SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(sec, f.name)) for f in dataclasses.fields(sec)}
        lines = []
        for name in self.SECTIONS:
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in cp[name].items())
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(typ, raw: str, where: str):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = base if base is not None else RunConfig()
    for name in cp.sections():
        if name not in RunConfig.SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        sec = getattr(cfg, name)
        types = {f.name: f.type for f in dataclasses.fields(sec)}
        for key, raw in cp[name].items():
            if key not in types:
                raise ConfigError(f"[{name}] unknown key {key!r}")
            setattr(sec, key, _coerce(types[key], raw, f"[{name}] {key}"))
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
