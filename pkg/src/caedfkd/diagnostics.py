"""Evaluation metrics and the per-epoch metrics record."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError
from .nets import DFNet
from .synth_generator import MemoryBank

# MetricsRecord keys written to the metrics stream, in order. Wall-clock
# time is kept out of this stream so reruns stay byte-identical; it goes to
# the sibling timing stream instead.
METRIC_KEYS = (
    "epoch", "generator_steps", "student_steps",
    "l_ce", "l_bn", "l_adv", "l_g", "l_kl", "l_cncl", "l_s",
    "student_acc", "lr", "low_conf",
)


@dataclass
class MetricsRecord:
    epoch: int
    generator_steps: int
    student_steps: int
    l_ce: float
    l_bn: float
    l_adv: float
    l_g: float
    l_kl: float
    l_cncl: float
    l_s: float
    student_acc: float
    lr: float
    low_conf: list[float] = field(default_factory=list)
    epoch_seconds: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.student_acc <= 1.0:
            raise ConfigError(f"accuracy {self.student_acc} outside [0, 1]")
        if any(not 0.0 <= p <= 1.0 for p in self.low_conf):
            raise ConfigError("low-confidence proportions must lie in [0, 1]")

    def stream_line(self) -> str:
        d = asdict(self)
        return json.dumps({k: d[k] for k in METRIC_KEYS}, separators=(",", ":"))

    def timing_line(self) -> str:
        return json.dumps({"epoch": self.epoch, "epoch_seconds": self.epoch_seconds}, separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str, seconds: float = 0.0) -> "MetricsRecord":
        d = json.loads(line)
        return cls(**{k: d[k] for k in METRIC_KEYS}, epoch_seconds=seconds)


@torch.no_grad()
def predict_logits(net: DFNet, images: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    was_training = net.training
    net.eval()
    out = [net(images[i:i + batch_size]) for i in range(0, images.shape[0], batch_size)]
    net.train(was_training)
    return torch.cat(out) if out else images.new_zeros((0, net.num_classes))


def evaluate_accuracy(net: DFNet, split) -> float:
    """Top-1 accuracy of ``net`` in eval mode on a dataset split."""
    if len(split.labels) == 0:
        raise ConfigError("cannot evaluate on an empty split")
    logits = predict_logits(net, split.images)
    return float((logits.argmax(1) == split.labels).float().mean())


def accuracy_from_logits(logits: torch.Tensor, labels: torch.Tensor) -> float:
    if len(labels) == 0:
        raise ConfigError("cannot evaluate on an empty split")
    return float((logits.argmax(1) == labels).float().mean())


def low_confidence_from_probs(max_probs: torch.Tensor, labels: torch.Tensor, k_count: int, threshold: float = 0.1) -> list[float]:
    """Per-category fraction of images whose max softmax is <= ``threshold``.

    Categories with no images get proportion 0.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError("low-confidence threshold must lie in (0, 1)")
    low = (max_probs <= threshold).double()
    counts = torch.bincount(labels, minlength=k_count).double()
    hits = torch.bincount(labels, weights=low, minlength=k_count)
    return torch.where(counts > 0, hits / counts.clamp_min(1), torch.zeros_like(counts)).tolist()


def low_confidence_profile(teacher: DFNet, bank: MemoryBank, threshold: float = 0.1) -> list[float]:
    if len(bank) == 0:
        raise ConfigError("cannot profile an empty memory bank")
    content = bank.contents()
    probs = F.softmax(predict_logits(teacher, content.images), dim=1)
    return low_confidence_from_probs(probs.max(1).values, content.labels, teacher.num_classes, threshold)


def running_mean(values) -> float:
    return float(np.mean(values)) if len(values) else 0.0
