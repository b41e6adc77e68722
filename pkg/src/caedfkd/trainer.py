"""The alternating generator/student distillation loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig
from .diagnostics import MetricsRecord, evaluate_accuracy, low_confidence_from_probs, running_mean
from .distiller import ScheduleState, cosine_lr, student_step
from .embedding_space import (
    CategoryEmbeddingSpace,
    FileProvider,
    StubProvider,
    cend_diffuse,
    ingest_embedding_file,
    init_embedding_space,
    make_categories,
    orthonormal_projection,
    write_embedding_file,
)
from .errors import TrainingError
from .nets import Generator, StudentCNN, bn_running_stats, param_digest
from .synth_generator import MemoryBank, cend_batch, gaussian_batch, generator_step

log = logging.getLogger(__name__)

# stream ids separating the draws of generator steps from student-side pair draws
GEN_STREAM = 0
PAIR_STREAM = 1


def build_space(cfg: RunConfig, class_names, provider=None) -> CategoryEmbeddingSpace:
    """Offline phase: one provider call per category."""
    categories = make_categories(class_names[: cfg.data.K])
    if provider is None:
        if cfg.embeddings.provider == "file":
            return ingest_embedding_file(cfg.embeddings.path, categories, cfg.embeddings.prompt_mode)
        provider = StubProvider(cfg.embeddings.provider_seed, cfg.embeddings.dim)
    return init_embedding_space(categories, provider, cfg.embeddings.prompt_mode)


def file_provider(path) -> FileProvider:
    return FileProvider(path)


@dataclass
class DistillResult:
    records: list[MetricsRecord]
    student: StudentCNN
    generator: Generator
    bank: MemoryBank
    space: CategoryEmbeddingSpace | None
    teacher_digest_start: str = ""
    extras: dict = field(default_factory=dict)


def distill(
    cfg: RunConfig,
    teacher,
    test_split,
    space: CategoryEmbeddingSpace | None = None,
    *,
    run_dir: str | Path | None = None,
    on_epoch: Callable[[MetricsRecord], None] | None = None,
) -> DistillResult:
    """Run ``cfg.student.epochs`` epochs of alternating updates.

    An epoch is ``iters_per_epoch`` rounds, each of ``g_steps`` generator
    updates followed by ``s_steps`` student updates. After every epoch the
    student is evaluated on ``test_split`` and one :class:`MetricsRecord` is
    produced (and appended to ``run_dir/metrics.jsonl`` when given).
    """
    torch.manual_seed(cfg.seed)
    k_count = cfg.data.K
    cend = cfg.embeddings.strategy == "cend"
    if cend and space is None:
        raise TrainingError("the cend input strategy needs a category embedding space")

    generator = Generator(cfg.embeddings.gen_dim, cfg.generator.base_channels)
    student = StudentCNN(k_count, cfg.student.feature_width)
    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.generator.lr,
                             betas=(cfg.generator.beta1, cfg.generator.beta2))
    opt_s = torch.optim.SGD(student.parameters(), lr=cfg.base_lr, momentum=cfg.student.momentum,
                            weight_decay=cfg.student.weight_decay)
    bank = MemoryBank(cfg.generator.bank_capacity)
    running = bn_running_stats(teacher)
    teacher_digest = param_digest(teacher)

    sources, projection = [], None
    if cend:
        sources = cfg.noise_sources(space.rms())
        projection = orthonormal_projection(space.dim, cfg.embeddings.gen_dim, cfg.embeddings.projection_seed)
    n_per_step = cfg.cend.n_per_step if cfg.cend.n_per_step is not None else cfg.cend.n_sources
    if cend:
        n_per_step = min(n_per_step, len(sources))
    use_cncl = cfg.uses_cncl

    metrics_path = timing_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = run_dir / "metrics.jsonl"
        timing_path = run_dir / "timing.jsonl"
        metrics_path.write_text("")
        timing_path.write_text("")

    g_step = s_step = 0
    records = []
    for epoch in range(1, cfg.student.epochs + 1):
        t0 = time.perf_counter()
        g_parts, s_parts = [], []
        gen_max_probs, gen_labels = [], []
        for _ in range(cfg.student.iters_per_epoch):
            for _ in range(cfg.student.g_steps):
                if cend:
                    diffused = cend_diffuse(space, sources, cfg.seed, g_step, GEN_STREAM)
                    inputs = cend_batch(diffused, projection, n_per_step, g_step)
                else:
                    inputs = gaussian_batch(k_count, 1 + n_per_step, cfg.embeddings.gen_dim, cfg.seed, g_step)
                start = bank.head
                g_parts.append(generator_step(
                    generator, teacher, student, inputs, opt_g, running,
                    lambda_bn=cfg.generator.lambda_bn, lambda_adv=cfg.generator.lambda_adv,
                    bank=bank, step=g_step, agree_mask=cfg.generator.adv_agree_mask,
                ))
                slots = (start + torch.arange(len(inputs.labels))) % bank.capacity
                with torch.no_grad():
                    probs = F.softmax(teacher(bank.images[slots]), dim=1)
                gen_max_probs.append(probs.max(1).values)
                gen_labels.append(inputs.labels)
                g_step += 1
            for _ in range(cfg.student.s_steps):
                lr = cosine_lr(ScheduleState(cfg.base_lr, cfg.schedule.min_lr, min(s_step, cfg.horizon), cfg.horizon))
                pair_set = cend_diffuse(space, sources, cfg.seed, s_step, PAIR_STREAM) if use_cncl else None
                s_parts.append(student_step(
                    student, teacher, bank, opt_s,
                    sample_seed=[cfg.seed, s_step, 1],
                    batch_size=cfg.student.batch_size,
                    generator=generator, diffused=pair_set, projection=projection,
                    alpha=cfg.student.alpha if use_cncl else 0.0,
                    tau=cfg.student.tau, kd_temperature=cfg.student.kd_temperature,
                    lr=lr, anchor_negatives=cfg.student.anchor_negatives,
                    augment=cfg.student.augment,
                ))
                s_step += 1
        acc = evaluate_accuracy(student, test_split)
        low_conf = low_confidence_from_probs(torch.cat(gen_max_probs), torch.cat(gen_labels), k_count,
                                             cfg.eval.low_conf_threshold)
        rec = MetricsRecord(
            epoch=epoch,
            generator_steps=g_step,
            student_steps=s_step,
            l_ce=running_mean([p.l_ce for p in g_parts]),
            l_bn=running_mean([p.l_bn for p in g_parts]),
            l_adv=running_mean([p.l_adv for p in g_parts]),
            l_g=running_mean([p.total for p in g_parts]),
            l_kl=running_mean([p.l_kl for p in s_parts]),
            l_cncl=running_mean([p.l_cncl for p in s_parts]),
            l_s=running_mean([p.total for p in s_parts]),
            student_acc=acc,
            lr=s_parts[-1].lr,
            low_conf=[round(float(x), 6) for x in low_conf],
            epoch_seconds=time.perf_counter() - t0,
        )
        records.append(rec)
        if metrics_path is not None:
            with metrics_path.open("a") as fh:
                fh.write(rec.stream_line() + "\n")
            with timing_path.open("a") as fh:
                fh.write(rec.timing_line() + "\n")
        log.info("epoch %d acc %.4f l_g %.4f l_s %.4f (%.1fs)", epoch, acc, rec.l_g, rec.l_s, rec.epoch_seconds)
        if on_epoch is not None:
            on_epoch(rec)
    if param_digest(teacher) != teacher_digest:
        raise TrainingError("teacher parameters changed during distillation")
    return DistillResult(records, student, generator, bank, space, teacher_digest)


def steps_to_threshold(records: list[MetricsRecord], threshold: float) -> float:
    """Generator steps taken when accuracy first reaches ``threshold`` (inf if never)."""
    for rec in records:
        if rec.student_acc >= threshold:
            return float(rec.generator_steps)
    return float(np.inf)
