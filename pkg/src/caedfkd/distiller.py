"""Student objective: logit distillation plus embedding-level contrastive pairs.

    L_S = L_KL + alpha * L_cncl

Contrastive pairs are built from the generator rather than from image
augmentations: a category's anchor image comes from its clean embedding,
its positives from the same embedding diffused by each noise source, and
its negatives from every other category.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .embedding_space import DiffusedEmbeddingSet
from .errors import ConfigError, TrainingError
from .nets import DFNet, forward_logits, frozen_bn_stats, generate, student_features
from .synth_generator import MemoryBank


def augment_batch(images: torch.Tensor, seed, shift: int = 4, flip: bool = True) -> torch.Tensor:
    """Random translation (reflect-padded crop) and horizontal flip per image.

    Deterministic in ``seed``. ``shift=0`` with ``flip=False`` is the identity.
    """
    if shift < 0:
        raise ConfigError("augmentation shift must be >= 0")
    b, _, h, w = images.shape
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, 2 * shift + 1, (b, 2))
    flips = rng.random(b) < 0.5 if flip else np.zeros(b, dtype=bool)
    padded = F.pad(images, (shift,) * 4, mode="reflect") if shift else images
    out = torch.stack([padded[i, :, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offsets)])
    if flips.any():
        idx = torch.from_numpy(np.flatnonzero(flips))
        out[idx] = out[idx].flip(3)
    return out


def kl_distill_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float = 4.0) -> torch.Tensor:
    """``T^2 * mean_b KL(softmax(t/T) || softmax(s/T))``."""
    if student_logits.shape != teacher_logits.shape:
        raise ConfigError(f"logit shapes differ: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    if temperature <= 0:
        raise ConfigError("distillation temperature must be > 0")
    log_s = F.log_softmax(student_logits / temperature, dim=1)
    log_t = F.log_softmax(teacher_logits / temperature, dim=1)
    kl = (log_t.exp() * (log_t - log_s)).sum(dim=1).mean()
    return kl * temperature**2


@dataclass
class ContrastivePairSet:
    """Features for each category's anchor, positives and negatives.

    ``negative_sources[k]`` records, for every negative of category ``k``,
    the category it was generated from, and ``negative_provenance[k]`` the
    noise source (0 for an anchor).
    """

    anchors: torch.Tensor  # K x F
    positives: torch.Tensor  # K x N x F
    negatives: torch.Tensor  # K x M x F
    negative_sources: torch.Tensor  # K x M
    negative_provenance: torch.Tensor  # K x M

    @property
    def num_categories(self) -> int:
        return self.anchors.shape[0]


@dataclass
class CNCLConfig:
    tau: float = 0.1
    alpha: float = 1.0
    feature_width: int = 64

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("student.tau must be > 0")
        if self.alpha < 0:
            raise ConfigError("student.alpha must be >= 0")


def pair_layout(k_count: int, n_sources: int, anchor_negatives: bool = True):
    """Index plan into the stacked feature matrix [anchors; diffused(k, n)].

    Row ``k`` is category ``k``'s anchor, row ``K + k*N + n`` its n-th
    diffused image. Returns (positive_idx K x N, negative_idx K x M,
    negative_category K x M, negative_provenance K x M).
    """
    if k_count < 2:
        raise ConfigError("contrastive training requires >= 2 categories")
    pos = np.array([[k_count + k * n_sources + n for n in range(n_sources)] for k in range(k_count)])
    neg, neg_cat, neg_prov = [], [], []
    for k in range(k_count):
        idx, cats, provs = [], [], []
        for other in range(k_count):
            if other == k:
                continue
            if anchor_negatives:
                idx.append(other)
                cats.append(other)
                provs.append(0)
            for n in range(n_sources):
                idx.append(k_count + other * n_sources + n)
                cats.append(other)
                provs.append(n + 1)
        neg.append(idx)
        neg_cat.append(cats)
        neg_prov.append(provs)
    return pos, np.array(neg), np.array(neg_cat), np.array(neg_prov)


def contrastive_inputs(diffused: DiffusedEmbeddingSet, projection: np.ndarray) -> torch.Tensor:
    """Generator inputs for pair building: K anchors then K*N diffused rows."""
    k_count, n_sources, dim = diffused.tensor.shape
    rows = np.concatenate([
        diffused.space.embeddings.astype(np.float64),
        diffused.tensor.reshape(k_count * n_sources, dim),
    ])
    return torch.from_numpy((rows @ projection.T).astype(np.float32))


def build_pairs(
    generator: DFNet,
    diffused: DiffusedEmbeddingSet,
    projection: np.ndarray,
    student: DFNet,
    *,
    anchor_negatives: bool = True,
) -> ContrastivePairSet:
    """Generate anchor and diffused images and embed them with the student.

    Generator output is detached; gradients flow only into the student and
    its projection head. The student's BN running statistics are left
    untouched so they keep tracking the distillation batches.
    """
    k_count, n_sources, _ = diffused.tensor.shape
    pos, neg, neg_cat, neg_prov = pair_layout(k_count, n_sources, anchor_negatives)
    with torch.no_grad():
        images = generate(generator, contrastive_inputs(diffused, projection))
    # the auxiliary pair pass must not drift the BN statistics used at evaluation
    with frozen_bn_stats(student):
        feats = student_features(student, images)
    return ContrastivePairSet(
        anchors=feats[:k_count],
        positives=feats[torch.from_numpy(pos)],
        negatives=feats[torch.from_numpy(neg)],
        negative_sources=torch.from_numpy(neg_cat),
        negative_provenance=torch.from_numpy(neg_prov),
    )


def _unit(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ConfigError("zero-norm feature vector: cosine similarity undefined")
    return x / norms


def cncl_loss(pairs: ContrastivePairSet, tau: float = 0.1) -> torch.Tensor:
    """Sum over positives of -log softmax over (positives + negatives), mean over categories."""
    if not tau > 0:
        raise ConfigError("student.tau must be > 0")
    a = _unit(pairs.anchors)
    p = _unit(pairs.positives)
    n = _unit(pairs.negatives)
    sim_pos = torch.einsum("kf,knf->kn", a, p) / tau
    sim_neg = torch.einsum("kf,kmf->km", a, n) / tau
    denom = torch.logsumexp(torch.cat([sim_pos, sim_neg], dim=1), dim=1, keepdim=True)
    return -(sim_pos - denom).sum(dim=1).mean()


@dataclass
class StudentLossBreakdown:
    l_kl: float
    l_cncl: float
    total: float
    alpha: float
    lr: float

    def as_dict(self) -> dict:
        return asdict(self)


def student_objective(student, teacher, images, pairs, alpha, tau, kd_temperature):
    with torch.no_grad():
        t_logits = forward_logits(teacher, images)
    s_logits = forward_logits(student, images)
    l_kl = kl_distill_loss(s_logits, t_logits, kd_temperature)
    l_cncl = cncl_loss(pairs, tau) if pairs is not None else torch.zeros(())
    return l_kl + alpha * l_cncl, l_kl, l_cncl


def student_step(
    student: DFNet,
    teacher: DFNet,
    bank: MemoryBank,
    optimizer: torch.optim.Optimizer,
    *,
    sample_seed,
    batch_size: int = 128,
    generator: DFNet | None = None,
    diffused: DiffusedEmbeddingSet | None = None,
    projection: np.ndarray | None = None,
    alpha: float = 1.0,
    tau: float = 0.1,
    kd_temperature: float = 4.0,
    lr: float | None = None,
    anchor_negatives: bool = True,
    augment: bool = False,
) -> StudentLossBreakdown:
    """One SGD update of the student (backbone, classifier and projection head).

    Pairs are only built when ``alpha > 0`` and a generator and diffused
    set are supplied; otherwise the update is plain logit distillation.
    With ``augment`` the memory images are randomly shifted and flipped
    before both networks see them.
    """
    if not teacher.frozen:
        raise TrainingError("teacher must be frozen during distillation")
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    student.train()
    batch = bank.sample(batch_size, sample_seed)
    images = augment_batch(batch.images, [*np.atleast_1d(sample_seed), 7]) if augment else batch.images
    pairs = None
    if alpha > 0 and generator is not None and diffused is not None:
        pairs = build_pairs(generator, diffused, projection, student, anchor_negatives=anchor_negatives)
    total, l_kl, l_cncl = student_objective(student, teacher, images, pairs, alpha, tau, kd_temperature)
    parts = {"l_kl": l_kl.item(), "l_cncl": l_cncl.item(), "total": total.item()}
    if not all(math.isfinite(v) for v in parts.values()):
        raise TrainingError(f"non-finite student loss component(s): {parts}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return StudentLossBreakdown(parts["l_kl"], parts["l_cncl"], parts["total"], alpha, optimizer.param_groups[0]["lr"])


@dataclass
class ScheduleState:
    base_lr: float
    min_lr: float
    t: int
    horizon: int

    def __post_init__(self):
        if self.min_lr > self.base_lr:
            raise ConfigError("schedule min_lr must not exceed base_lr")
        if self.horizon <= 0 or not 0 <= self.t <= self.horizon:
            raise ConfigError(f"schedule step {self.t} outside [0, {self.horizon}]")


def cosine_lr(state: ScheduleState) -> float:
    return state.min_lr + 0.5 * (state.base_lr - state.min_lr) * (1 + math.cos(math.pi * state.t / state.horizon))
