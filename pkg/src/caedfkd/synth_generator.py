"""Generator objective and the synthetic-image memory bank.

The generator minimizes

    L_G = L_CE + lambda_bn * L_BN + lambda_adv * L_adv

where L_CE asks the frozen teacher to recognize each image as the category
whose embedding produced it, L_BN matches the teacher's per-layer batch
statistics to its stored running statistics, and L_adv is the negated
teacher/student KL divergence, so lowering L_G pushes the two networks apart.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .embedding_space import DiffusedEmbeddingSet
from .errors import ConfigError, TrainingError
from .nets import BNStatRecord, DFNet, forward_logits, generate, record_bn_batch_stats

log = logging.getLogger(__name__)

# provenance tags: 0 = anchor, n >= 1 = diffused by source n, -1 = plain gaussian input
ANCHOR = 0
GAUSSIAN = -1


@dataclass
class GeneratorLossBreakdown:
    l_ce: float
    l_bn: float
    l_adv: float
    total: float
    lambda_bn: float
    lambda_adv: float

    def as_dict(self) -> dict:
        return asdict(self)


def ce_loss(teacher_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    k = teacher_logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ConfigError(f"label out of range [0, {k})")
    return F.cross_entropy(teacher_logits, labels)


def bn_loss(batch_stats, running_stats) -> torch.Tensor:
    """Mean over BN layers of ||mu_b - mu_r||^2 + ||var_b - var_r||^2.

    ``batch_stats`` is a list of (mean, var) tensors, one per layer;
    ``running_stats`` a :class:`BNStatRecord` or a list of the same shape.
    """
    if isinstance(running_stats, BNStatRecord):
        running_stats = running_stats.as_tensors()
    if len(batch_stats) != len(running_stats) or not batch_stats:
        raise ConfigError(
            f"batch statistics cover {len(batch_stats)} layers, running statistics {len(running_stats)}"
        )
    total = 0.0
    for (mb, vb), (mr, vr) in zip(batch_stats, running_stats):
        if mb.shape != mr.shape:
            raise ConfigError(f"BN layer width mismatch: {tuple(mb.shape)} vs {tuple(mr.shape)}")
        mr = mr.to(mb)
        vr = vr.to(vb)
        total = total + ((mb - mr) ** 2).sum() + ((vb - vr) ** 2).sum()
    return total / len(batch_stats)


def adv_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor, agree_mask: bool = False) -> torch.Tensor:
    """Negative batch-mean KL(teacher || student); always <= 0.

    With ``agree_mask`` only samples on which teacher and student pick the
    same class contribute (the rest count as zero), so the generator is not
    rewarded for pushing samples the student already gets wrong further away.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ConfigError(f"logit shapes differ: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    log_t = F.log_softmax(teacher_logits, dim=1)
    log_s = F.log_softmax(student_logits, dim=1)
    kl = (log_t.exp() * (log_t - log_s)).sum(dim=1)
    if agree_mask:
        kl = kl * (teacher_logits.argmax(1) == student_logits.argmax(1)).to(kl.dtype)
    return -kl.mean()


# --------------------------------------------------------------------------
# generator inputs


@dataclass
class GeneratorInput:
    embeddings: torch.Tensor  # B x D_gen
    labels: torch.Tensor
    provenance: torch.Tensor


def cend_batch(
    diffused: DiffusedEmbeddingSet,
    projection: np.ndarray,
    n_per_step: int | None = None,
    step: int = 0,
) -> GeneratorInput:
    """Every anchor once plus ``n_per_step`` diffused rows per category.

    When fewer than N sources are used per step, the chosen sources rotate
    with ``step`` so that all of them are visited.
    """
    k_count, n_sources, _ = diffused.tensor.shape
    n_per_step = n_sources if n_per_step is None else n_per_step
    if not 0 <= n_per_step <= n_sources:
        raise ConfigError(f"n_per_step must lie in [0, {n_sources}], got {n_per_step}")
    chosen = [(step * n_per_step + j) % n_sources for j in range(n_per_step)]
    rows = [diffused.space.embeddings.astype(np.float64)]
    labels = [np.arange(k_count)]
    prov = [np.full(k_count, ANCHOR)]
    for n in chosen:
        rows.append(diffused.tensor[:, n, :])
        labels.append(np.arange(k_count))
        prov.append(np.full(k_count, n + 1))
    z = np.concatenate(rows) @ projection.T
    return GeneratorInput(
        torch.from_numpy(z.astype(np.float32)),
        torch.from_numpy(np.concatenate(labels)).long(),
        torch.from_numpy(np.concatenate(prov)).long(),
    )


def gaussian_batch(k_count: int, per_category: int, dim: int, seed: int, step: int) -> GeneratorInput:
    """Unstructured baseline: fresh N(0, I) inputs, labels used only as CE targets."""
    rng = np.random.default_rng([int(seed), int(step), 7])
    z = rng.standard_normal((k_count * per_category, dim))
    labels = np.tile(np.arange(k_count), per_category)
    return GeneratorInput(
        torch.from_numpy(z.astype(np.float32)),
        torch.from_numpy(labels).long(),
        torch.full((len(labels),), GAUSSIAN, dtype=torch.long),
    )


# --------------------------------------------------------------------------
# memory bank


@dataclass
class SyntheticBatch:
    images: torch.Tensor
    labels: torch.Tensor
    provenance: torch.Tensor
    step: torch.Tensor | int = 0

    def __len__(self) -> int:
        return self.labels.shape[0]


class MemoryBank:
    """Bounded FIFO store of synthetic images.

    Capacity counts images; when full, the oldest images are overwritten
    first. Reads never mutate the bank.
    """

    def __init__(self, capacity: int = 4096, image_shape=(3, 32, 32)):
        if capacity < 1:
            raise ConfigError(f"memory bank capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.images = torch.zeros((capacity, *image_shape))
        self.labels = torch.zeros(capacity, dtype=torch.long)
        self.provenance = torch.zeros(capacity, dtype=torch.long)
        self.steps = torch.zeros(capacity, dtype=torch.long)
        self.head = 0  # next slot to write
        self.size = 0
        self.written = 0

    def __len__(self) -> int:
        return self.size

    def write(self, batch: SyntheticBatch) -> None:
        n = len(batch)
        if n > self.capacity:
            # only the newest `capacity` images can survive anyway
            batch = SyntheticBatch(batch.images[-self.capacity:], batch.labels[-self.capacity:],
                                   batch.provenance[-self.capacity:], batch.step)
            n = self.capacity
        slots = (self.head + torch.arange(n)) % self.capacity
        self.images[slots] = batch.images.detach().to(self.images.dtype)
        self.labels[slots] = batch.labels
        self.provenance[slots] = batch.provenance
        step = torch.as_tensor(batch.step, dtype=torch.long)
        self.steps[slots] = step.expand(n) if step.ndim == 0 else step[-n:]
        self.head = int((self.head + n) % self.capacity)
        self.size = min(self.capacity, self.size + n)
        self.written += n

    def _ordered_slots(self) -> torch.Tensor:
        start = (self.head - self.size) % self.capacity
        return (start + torch.arange(self.size)) % self.capacity

    def contents(self) -> SyntheticBatch:
        """All stored images, oldest first (a copy)."""
        s = self._ordered_slots()
        return SyntheticBatch(self.images[s].clone(), self.labels[s].clone(), self.provenance[s].clone(), self.steps[s].clone())

    def sample(self, batch_size: int, seed) -> SyntheticBatch:
        if self.size == 0:
            raise ConfigError("cannot sample from an empty memory bank")
        rng = np.random.default_rng(seed)
        pick = torch.from_numpy(rng.integers(0, self.size, batch_size))
        s = self._ordered_slots()[pick]
        return SyntheticBatch(self.images[s], self.labels[s], self.provenance[s], self.steps[s])


def memory_write(bank: MemoryBank, batch: SyntheticBatch) -> None:
    bank.write(batch)


def memory_sample(bank: MemoryBank, batch_size: int, seed) -> SyntheticBatch:
    return bank.sample(batch_size, seed)


# --------------------------------------------------------------------------
# the step


def generator_objective(
    generator: DFNet,
    teacher: DFNet,
    student: DFNet,
    inputs: GeneratorInput,
    running_stats,
    lambda_bn: float,
    lambda_adv: float,
    agree_mask: bool = False,
):
    """Return ``(total, (l_ce, l_bn, l_adv), images)`` as differentiable tensors."""
    images = generate(generator, inputs.embeddings)
    with record_bn_batch_stats(teacher) as stats:
        t_logits = forward_logits(teacher, images)
    s_logits = forward_logits(student, images)
    l_ce = ce_loss(t_logits, inputs.labels)
    l_bn = bn_loss(stats, running_stats)
    l_adv = adv_loss(s_logits, t_logits, agree_mask)
    total = l_ce + lambda_bn * l_bn + lambda_adv * l_adv
    return total, (l_ce, l_bn, l_adv), images


def _abort(parts: dict) -> None:
    bad = {k: v for k, v in parts.items() if not np.isfinite(v)}
    if bad:
        raise TrainingError(f"non-finite generator loss component(s): {parts}")


def generator_step(
    generator: DFNet,
    teacher: DFNet,
    student: DFNet,
    inputs: GeneratorInput,
    optimizer: torch.optim.Optimizer,
    running_stats: BNStatRecord,
    *,
    lambda_bn: float = 1.0,
    lambda_adv: float = 1.0,
    bank: MemoryBank | None = None,
    step: int = 0,
    agree_mask: bool = False,
) -> GeneratorLossBreakdown:
    """One Adam update of the generator; teacher and student stay untouched."""
    if not teacher.frozen:
        raise TrainingError("teacher must be frozen during distillation")
    student_mode = student.training
    student.eval()
    for p in student.parameters():
        p.requires_grad_(False)
    generator.train()
    try:
        total, (l_ce, l_bn, l_adv), images = generator_objective(
            generator, teacher, student, inputs, running_stats, lambda_bn, lambda_adv, agree_mask
        )
        parts = {"l_ce": l_ce.item(), "l_bn": l_bn.item(), "l_adv": l_adv.item(), "total": total.item()}
        _abort(parts)
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
    finally:
        for p in student.parameters():
            p.requires_grad_(True)
        student.train(student_mode)
    if bank is not None:
        bank.write(SyntheticBatch(images.detach(), inputs.labels, inputs.provenance, step))
    return GeneratorLossBreakdown(parts["l_ce"], parts["l_bn"], parts["l_adv"], parts["total"], lambda_bn, lambda_adv)
