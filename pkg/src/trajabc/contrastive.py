"""Action-based contrastive loss, the SimCLR ablation loss, and batch assembly.

Rows of a :class:`ContrastiveBatch` are trajectory embeddings.  Only the real
samples act as anchors; noise-augmented copies and CVAE-decoded synthetic
segments join the batch as extra positives/negatives, carrying the action id
of the real sample they were derived from.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import renormalize_segment

REAL, AUGMENTED, SYNTHETIC = "real", "augmented", "synthetic"


@dataclass
class LossWeights:
    beta: float = 0.75
    tau: float = 0.1
    epsilon_sigma: float = 0.01
    L_synth: int = 2

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.epsilon_sigma < 0 or self.L_synth < 0:
            raise ValueError("epsilon_sigma and L_synth must be >= 0")


@dataclass
class ContrastiveBatch:
    embeddings: Tensor
    actions: np.ndarray
    origin: list[str]
    source: np.ndarray  # index of the real row each row derives from
    anchor_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.source = np.asarray(self.source, dtype=np.int64)
        n = self.embeddings.shape[0]
        if not (len(self.actions) == len(self.origin) == len(self.source) == n):
            raise ValueError("embeddings, actions, origin and source must have equal length")
        self.anchor_mask = np.array([o == REAL for o in self.origin], dtype=bool)
        derived = ~self.anchor_mask
        if np.any(self.actions[derived] != self.actions[self.source[derived]]):
            raise ValueError("derived rows must inherit the action of their source row")

    @classmethod
    def build(cls, real: Tensor, actions, augmented: Tensor | None = None,
              synthetic: Tensor | None = None, synth_source=None) -> "ContrastiveBatch":
        """Stack real rows, one augmented view per real row, then synthetic rows."""
        actions = np.asarray(actions, dtype=np.int64)
        B = real.shape[0]
        parts, origin = [real], [REAL] * B
        src = list(range(B))
        if augmented is not None:
            parts.append(augmented)
            origin += [AUGMENTED] * B
            src += list(range(B))
        if synthetic is not None and synthetic.shape[0] > 0:
            synth_source = np.asarray(synth_source, dtype=np.int64)
            parts.append(synthetic)
            origin += [SYNTHETIC] * len(synth_source)
            src += synth_source.tolist()
        src = np.asarray(src, dtype=np.int64)
        emb = ad.concat(parts, axis=0) if len(parts) > 1 else real
        return cls(emb, actions[src], origin, src)

    @property
    def n_real(self) -> int:
        return int(self.anchor_mask.sum())


def augment_anchor(observed, epsilon_sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Observed boxes plus i.i.d. N(0, epsilon_sigma^2) noise per coordinate."""
    observed = np.asarray(observed, dtype=np.float64)
    if epsilon_sigma < 0:
        raise ValueError("epsilon_sigma must be >= 0")
    if epsilon_sigma == 0:
        return observed.copy()
    return observed + rng.normal(0.0, epsilon_sigma, size=observed.shape)


def synth_samples(model, batch_observed, actions, L_synth: int, rng: np.random.Generator):
    """Decode ``L_synth`` prior samples per real row, detached from the graph.

    Each future is cut to the encoder's input length (last ``t_obs`` steps of
    observed+future) and re-normalized on its own final box.  Returns a list of
    ``(segment, source_index, action_id)``.
    """
    if L_synth <= 0:
        return []
    obs = np.asarray(batch_observed, dtype=np.float64)
    B, t_obs = obs.shape[0], obs.shape[1]
    noise = rng.standard_normal((B, L_synth, model.cfg.d_z))
    futures = model.predict_multimodal(obs, L_synth, 0, noise=noise)
    out = []
    for j in range(B):
        for l in range(L_synth):
            seg = np.concatenate([obs[j], futures[j, l]], axis=0)[-t_obs:]
            out.append((renormalize_segment(seg), j, int(actions[j])))
    return out


def partition(batch: ContrastiveBatch, i: int) -> tuple[set[int], set[int]]:
    """Positive and negative row indices from the point of view of anchor ``i``."""
    if not batch.anchor_mask[i]:
        raise ValueError(f"row {i} is not an anchor")
    a = batch.actions[i]
    rows = np.arange(len(batch.actions))
    pos = {int(j) for j in rows[(batch.actions == a) & (rows != i)]}
    neg = {int(k) for k in rows[batch.actions != a]}
    return pos, neg


def _masks(batch: ContrastiveBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    anchors = np.flatnonzero(batch.anchor_mask)
    acts = batch.actions
    same = acts[anchors][:, None] == acts[None, :]
    not_self = np.ones_like(same)
    not_self[np.arange(len(anchors)), anchors] = False
    return anchors, same & not_self, ~same


@dataclass
class ContrastiveResult:
    loss: Tensor
    b_eff: int
    anchors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    terms: np.ndarray = field(default_factory=lambda: np.zeros(0))  # per contributing anchor

    @property
    def degenerate(self) -> bool:
        return self.b_eff == 0


def action_contrastive_loss(batch: ContrastiveBatch, tau: float, *, normalize: bool = False,
                            supcon_denominator: bool = False) -> ContrastiveResult:
    """Matrix-form action contrastive loss.

    Per anchor ``i``: ``-(lse_{pos}(h_i . h_j / tau) - lse_{neg}(h_i . h_k / tau))``,
    averaged over anchors that have at least one positive and one negative.
    With ``supcon_denominator`` the denominator ranges over all non-self rows.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    anchors, pos, neg = _masks(batch)
    if supcon_denominator:
        neg = pos | neg
    valid = pos.any(axis=1) & neg.any(axis=1)
    b_eff = int(valid.sum())
    if b_eff == 0:
        return ContrastiveResult(Tensor(0.0), 0)
    emb = batch.embeddings
    if normalize:
        emb = ad.l2_normalize(emb)
    rows = anchors[valid]
    sim = ad.scale(ad.matmul(emb[rows], ad.transpose(emb)), 1.0 / tau)
    term = ad.logsumexp(sim, axis=1, mask=pos[valid]) - ad.logsumexp(sim, axis=1, mask=neg[valid])
    return ContrastiveResult(ad.scale(term.sum(), -1.0 / b_eff), b_eff, rows, -term.data.copy())


def simclr_loss(batch: ContrastiveBatch, tau: float) -> Tensor:
    """NT-Xent over real rows and their augmented twins with cosine similarity.

    For every row the positive is its twin; the denominator spans all other rows.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    origin = np.asarray(batch.origin)
    real = np.flatnonzero(origin == REAL)
    aug = np.flatnonzero(origin == AUGMENTED)
    twin_of = {int(batch.source[k]): int(k) for k in aug}
    if len(aug) != len(real) or any(int(r) not in twin_of for r in real):
        raise ValueError("simclr_loss: every real row needs exactly one augmented twin")
    rows = np.concatenate([real, aug])
    partner = np.array([twin_of[int(r)] for r in real] + [int(batch.source[k]) for k in aug])
    where = {int(r): p for p, r in enumerate(rows)}
    pos_in_rows = np.array([where[int(r)] for r in partner])
    emb = ad.l2_normalize(batch.embeddings[rows])
    n = len(rows)
    sim = ad.scale(ad.matmul(emb, ad.transpose(emb)), 1.0 / tau)
    others = ~np.eye(n, dtype=bool)
    positive = ad.index(sim, (np.arange(n), pos_in_rows))
    return ad.scale((ad.logsumexp(sim, axis=1, mask=others) - positive).sum(), 1.0 / n)


def combined_loss(traj: Tensor, contrastive: Tensor, beta: float) -> Tensor:
    """traj + beta * contrastive."""
    return traj + ad.scale(contrastive, beta)
