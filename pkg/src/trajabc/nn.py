"""Parameters, layers, the Adam optimizer, and the binary checkpoint format."""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

CKPT_MAGIC = "TRAJABC-CKPT"
CKPT_VERSION = "v1"


class CheckpointError(ValueError):
    pass


class ParamRegistry:
    """Ordered ``dot.path -> Tensor`` map of trainable parameters."""

    def __init__(self, items: Iterable[tuple[str, np.ndarray]] = ()):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, value in items:
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """Copy of current values, detached from the registry."""
        return OrderedDict((k, t.data.copy()) for k, t in self._params.items())

    def load_state(self, state) -> None:
        for k, v in state.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter {k!r}")
            if tuple(np.shape(v)) != self._params[k].shape:
                raise ShapeError(f"load {k}", self._params[k].shape, np.shape(v))
            self._params[k].data = np.array(v, dtype=np.float64)

    def grad_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float(np.sum(t.grad * t.grad))
        return float(np.sqrt(total))


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    kind: str = "weight"  # "weight" or "bias"


def init_params(spec: Sequence[ParamSpec], seed: int) -> ParamRegistry:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = shape[0]; biases zero."""
    rng = np.random.default_rng(seed)
    reg = ParamRegistry()
    for p in spec:
        if p.kind == "bias":
            reg.add(p.name, np.zeros(p.shape))
        else:
            bound = 1.0 / np.sqrt(p.shape[0])
            reg.add(p.name, rng.uniform(-bound, bound, size=p.shape))
    return reg


# ---------------------------------------------------------------- layers

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    out = ad.matmul(x, w)
    return out if b is None else out + b


_ACTIVATIONS = {
    None: lambda t: t,
    "none": lambda t: t,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
}


def mlp_forward(x: Tensor, layers: Sequence[tuple[Tensor, Tensor | None, str | None]]) -> Tensor:
    """Apply ``(weight, bias, activation)`` triples in order."""
    for w, b, act in layers:
        x = _ACTIVATIONS[act](linear(x, w, b))
    return x


def mlp_spec(prefix: str, dims: Sequence[int]) -> list[ParamSpec]:
    out = []
    for k, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
        out.append(ParamSpec(f"{prefix}.{k}.w", (i, o)))
        out.append(ParamSpec(f"{prefix}.{k}.b", (o,), "bias"))
    return out


def mlp_layers(reg: ParamRegistry, prefix: str, n_layers: int, hidden_act: str = "tanh"):
    layers = []
    for k in range(n_layers):
        act = hidden_act if k < n_layers - 1 else None
        layers.append((reg[f"{prefix}.{k}.w"], reg[f"{prefix}.{k}.b"], act))
    return layers


def lstm_spec(prefix: str, d_in: int, d_h: int) -> list[ParamSpec]:
    # fused gate weights, rows = [x; h], column blocks = (input, forget, cell, output)
    return [ParamSpec(f"{prefix}.w", (d_in + d_h, 4 * d_h)),
            ParamSpec(f"{prefix}.b", (4 * d_h,), "bias")]


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step on a batch: ``x [B, d_in]``, ``h, c [B, d_h]``."""
    d_h = h.shape[-1]
    if c.shape != h.shape or w.shape != (x.shape[-1] + d_h, 4 * d_h) or b.shape != (4 * d_h,):
        raise ShapeError("lstm_cell", x.shape, w.shape,
                         f"h {h.shape}, c {c.shape}, b {b.shape}")
    z = linear(ad.concat([x, h], axis=-1), w, b)
    i = ad.sigmoid(z[..., :d_h])
    f = ad.sigmoid(z[..., d_h:2 * d_h])
    g = ad.tanh(z[..., 2 * d_h:3 * d_h])
    o = ad.sigmoid(z[..., 3 * d_h:])
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    return h_new, c_new


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_grad_norm(registry: ParamRegistry, max_norm: float) -> float:
    norm = registry.grad_norm()
    if norm > max_norm > 0:
        k = max_norm / (norm + 1e-12)
        for _, t in registry.items():
            if t.grad is not None:
                t.grad = t.grad * k
    return norm


def adam_step(registry: ParamRegistry, state: AdamState) -> None:
    """Bias-corrected Adam update for every parameter, then clear grads."""
    missing = [name for name, t in registry.items() if t.grad is None]
    if missing:
        raise ValueError(f"adam_step: parameter {missing[0]!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in registry.items():
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        t.data = t.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.grad = None


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, registry: ParamRegistry) -> None:
    """Header line, then per parameter: name, shape, float32 LE values."""
    buf = bytearray(f"{CKPT_MAGIC} {CKPT_VERSION}\n".encode())
    for name, t in registry.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        buf += t.data.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header")
    header = blob[:nl].decode("utf-8", errors="replace").split()
    if len(header) != 2 or header[0] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (header {blob[:nl]!r})")
    if header[1] != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header[1]!r}")
    pos = nl + 1
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (nd,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{nd}I", blob, pos)
            pos += 4 * nd
            count = int(np.prod(shape)) if nd else 1
            vals = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            out[name] = vals.astype(np.float64).reshape(shape)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from None
    return out
