"""Desk-scale teacher, student and generator networks plus their plumbing.

All activations are SiLU and all downsampling is average pooling or
strided convolution, so every network is smooth in its parameters and the
finite-difference gradient check stays meaningful.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import struct
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, FormatError, TrainingError

log = logging.getLogger(__name__)

IMAGE_SHAPE = (3, 32, 32)
CHECKPOINT_MAGIC = b"CAEC"
CHECKPOINT_VERSION = 1


def _conv_block(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.SiLU(),
    )


class DFNet(nn.Module):
    """Base for all three network roles; carries identity and freeze state."""

    role: str = ""

    def __init__(self, architecture_id: str):
        super().__init__()
        self.architecture_id = architecture_id
        self.frozen = False

    def freeze(self) -> "DFNet":
        self.frozen = True
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def train(self, mode: bool = True):
        # a frozen network never leaves eval mode, so its BN buffers cannot move
        return super().train(mode and not self.frozen)


class TeacherCNN(DFNet):
    role = "teacher"

    def __init__(self, num_classes: int = 10, widths: Sequence[int] = (16, 32, 64, 128)):
        super().__init__(f"teacher-cnn4/k={num_classes}")
        c = IMAGE_SHAPE[0]
        layers = []
        for i, w in enumerate(widths):
            layers.append(_conv_block(c, w))
            if i < len(widths) - 1:
                layers.append(nn.AvgPool2d(2))
            c = w
        self.body = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.fc = nn.Linear(c, num_classes)
        self.num_classes = num_classes

    def forward(self, x):
        return self.fc(self.body(x))


class StudentCNN(DFNet):
    role = "student"

    def __init__(self, num_classes: int = 10, feature_width: int = 64, widths: Sequence[int] = (32, 64)):
        super().__init__(f"student-cnn2/k={num_classes},f={feature_width}")
        c = IMAGE_SHAPE[0]
        layers = []
        for w in widths:
            layers.append(_conv_block(c, w, stride=2))
            c = w
        self.body = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.fc = nn.Linear(c, num_classes)
        # projection head used only by the contrastive loss
        self.head = nn.Sequential(nn.Linear(c, feature_width), nn.SiLU(), nn.Linear(feature_width, feature_width))
        self.num_classes = num_classes
        self.feature_width = feature_width

    def forward(self, x):
        return self.fc(self.body(x))

    def features(self, x):
        return self.head(self.body(x))


class Generator(DFNet):
    """Embedding -> dense -> 8x8 map -> two upsample-conv blocks -> tanh.

    BN layers here always normalize with batch statistics and keep no
    running buffers, so generating images never mutates generator state.
    """

    role = "generator"

    def __init__(self, in_dim: int = 64, base_channels: int = 48):
        super().__init__(f"generator-up2/d={in_dim},c={base_channels}")
        self.in_dim = in_dim
        self.base_channels = base_channels
        self.init_size = IMAGE_SHAPE[1] // 4
        self.fc = nn.Linear(in_dim, base_channels * self.init_size**2)
        bn = lambda c: nn.BatchNorm2d(c, track_running_stats=False)  # noqa: E731
        self.body = nn.Sequential(
            bn(base_channels),
            nn.Upsample(scale_factor=2),
            nn.Conv2d(base_channels, 32, 3, 1, 1, bias=False),
            bn(32),
            nn.SiLU(),
            nn.Upsample(scale_factor=2),
            nn.Conv2d(32, 16, 3, 1, 1, bias=False),
            bn(16),
            nn.SiLU(),
            nn.Conv2d(16, IMAGE_SHAPE[0], 3, 1, 1),
            nn.Tanh(),
        )

    def forward(self, z):
        h = self.fc(z).view(z.shape[0], self.base_channels, self.init_size, self.init_size)
        return self.body(h)


def _parse_arch(architecture_id: str) -> tuple[str, dict[str, int]]:
    name, _, rest = architecture_id.partition("/")
    params = {}
    for item in filter(None, rest.split(",")):
        k, _, v = item.partition("=")
        params[k] = int(v)
    return name, params


def build_network(architecture_id: str) -> DFNet:
    name, p = _parse_arch(architecture_id)
    try:
        if name == "teacher-cnn4":
            net = TeacherCNN(p["k"])
        elif name == "student-cnn2":
            net = StudentCNN(p["k"], p["f"])
        elif name == "generator-up2":
            net = Generator(p["d"], p["c"])
        else:
            raise ConfigError(f"unknown architecture id {architecture_id!r}")
    except KeyError as exc:
        raise ConfigError(f"architecture id {architecture_id!r} lacks parameter {exc}") from None
    if net.architecture_id != architecture_id:
        raise ConfigError(f"malformed architecture id {architecture_id!r}")
    return net


# --------------------------------------------------------------------------
# forward contracts


def _check_images(net: nn.Module, images: torch.Tensor) -> None:
    if images.ndim != 4 or tuple(images.shape[1:]) != IMAGE_SHAPE:
        raise ConfigError(f"expected images of shape (B, {', '.join(map(str, IMAGE_SHAPE))}), got {tuple(images.shape)}")


def forward_logits(net: DFNet, images: torch.Tensor) -> torch.Tensor:
    if net.role not in ("teacher", "student"):
        raise ConfigError(f"forward_logits needs a teacher or student, got {net.role}")
    _check_images(net, images)
    if images.shape[0] == 0:
        return images.new_zeros((0, net.num_classes))
    return net(images)


def student_features(net: DFNet, images: torch.Tensor) -> torch.Tensor:
    if net.role != "student":
        raise ConfigError(f"student_features needs a student network, got {net.role}")
    _check_images(net, images)
    return net.features(images)


def generate(net: DFNet, embeddings: torch.Tensor) -> torch.Tensor:
    if net.role != "generator":
        raise ConfigError(f"generate needs a generator network, got {net.role}")
    if embeddings.ndim != 2 or embeddings.shape[1] != net.in_dim:
        raise ConfigError(f"generator expects embeddings of width {net.in_dim}, got shape {tuple(embeddings.shape)}")
    return net(embeddings)


def param_digest(net: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in net.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# batch-norm statistics


@dataclass
class BNStatRecord:
    layers: list[str]
    means: list[np.ndarray]
    variances: list[np.ndarray]

    def as_tensors(self, dtype=torch.float32) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return [(torch.as_tensor(m, dtype=dtype), torch.as_tensor(v, dtype=dtype)) for m, v in zip(self.means, self.variances)]


def _bn_layers(net: nn.Module) -> list[tuple[str, nn.BatchNorm2d]]:
    return [(n, m) for n, m in net.named_modules() if isinstance(m, nn.modules.batchnorm._BatchNorm) and m.track_running_stats]


def bn_running_stats(net: DFNet) -> BNStatRecord:
    layers = _bn_layers(net)
    if not layers:
        raise ConfigError(f"{net.role} network has no batch-norm layers")
    return BNStatRecord(
        layers=[n for n, _ in layers],
        means=[m.running_mean.detach().cpu().numpy().copy() for _, m in layers],
        variances=[m.running_var.detach().cpu().numpy().copy() for _, m in layers],
    )


@contextmanager
def record_bn_batch_stats(net: nn.Module) -> Iterator[list]:
    """Collect (mean, biased variance) of every BN layer's input during forward."""
    stats: list[tuple[torch.Tensor, torch.Tensor]] = []

    def hook(module, inputs, output):
        x = inputs[0]
        stats.append((x.mean(dim=(0, 2, 3)), x.var(dim=(0, 2, 3), unbiased=False)))

    handles = [m.register_forward_hook(hook) for _, m in _bn_layers(net)]
    try:
        yield stats
    finally:
        for h in handles:
            h.remove()


@contextmanager
def frozen_bn_stats(net: nn.Module) -> Iterator[None]:
    """Forward passes inside use batch statistics but leave BN running buffers as they were."""
    layers = [m for _, m in _bn_layers(net)]
    saved = [(m.momentum, m.num_batches_tracked.clone() if m.num_batches_tracked is not None else None)
             for m in layers]
    for m in layers:
        m.momentum = 0.0
    try:
        yield
    finally:
        for m, (momentum, tracked) in zip(layers, saved):
            m.momentum = momentum
            if tracked is not None:
                m.num_batches_tracked.copy_(tracked)


# --------------------------------------------------------------------------
# gradient check


def shadow64(net: nn.Module) -> nn.Module:
    """Independent float64 copy of ``net`` for finite-difference checks."""
    twin = copy.deepcopy(net).double()
    for p in twin.parameters():
        p.requires_grad_(True)
    return twin


def grad_check(
    loss_fn: Callable[[object], torch.Tensor],
    params: Sequence[torch.Tensor],
    probe=None,
    *,
    h: float = 1e-3,
    n_coords: int = 24,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn(probe)`` must compute a scalar from ``params`` (float64
    leaves). A random subset of ``n_coords`` coordinates is checked. Each
    discrepancy ``|a - n|`` is taken relative to the largest gradient
    magnitude in the sample (at least ``floor``): with a fixed step the
    O(h^2) truncation error would otherwise dominate near-zero coordinates.
    """
    params = [p for p in params if p.requires_grad]
    loss = loss_fn(probe)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} at grad-check probe")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    diffs, scale = [], floor
    with torch.no_grad():
        for flat in picks:
            i = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[i])
            view = params[i].view(-1)
            orig = view[j].item()
            view[j] = orig + h
            f_plus = float(loss_fn(probe))
            view[j] = orig - h
            f_minus = float(loss_fn(probe))
            view[j] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            analytic = float(grads[i].view(-1)[j])
            diffs.append(abs(analytic - numeric))
            scale = max(scale, abs(analytic), abs(numeric))
    return max(diffs) / scale


# --------------------------------------------------------------------------
# teacher pretraining


@dataclass
class Checkpoint:
    architecture_id: str
    state: "OrderedDict[str, torch.Tensor]"
    optimizer_state: dict | None = None
    epoch: int = 0
    seed: int = 0

    @classmethod
    def from_network(cls, net: DFNet, optimizer=None, epoch: int = 0, seed: int = 0) -> "Checkpoint":
        state = OrderedDict((k, v.detach().clone()) for k, v in net.state_dict().items())
        return cls(net.architecture_id, state, optimizer.state_dict() if optimizer else None, epoch, seed)

    def build(self, role: str | None = None) -> DFNet:
        net = build_network(self.architecture_id)
        if role is not None and net.role != role:
            raise FormatError(f"checkpoint holds a {net.role} ({self.architecture_id}), expected a {role}")
        net.load_state_dict(self.state)
        return net


def pretrain_teacher(
    train,
    test,
    *,
    epochs: int = 8,
    lr: float = 2e-3,
    batch_size: int = 64,
    seed: int = 0,
    accuracy_floor: float = 0.95,
    num_classes: int | None = None,
) -> tuple[TeacherCNN, Checkpoint, float]:
    """Train the teacher on a labeled toy dataset.

    Returns the frozen teacher, its checkpoint and held-out accuracy.
    Raises ``TrainingError("teacher underfit ...")`` when the accuracy floor
    is not met.
    """
    k = num_classes or int(train.labels.max()) + 1
    torch.manual_seed(seed)
    net = TeacherCNN(k)
    if epochs <= 0:
        raise TrainingError("teacher underfit: no training epochs configured")
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs)
    gen = torch.Generator().manual_seed(seed)
    n = train.images.shape[0]
    for epoch in range(epochs):
        net.train()
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if idx.numel() < 2:
                continue
            loss = F.cross_entropy(net(train.images[idx]), train.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
        log.info("teacher epoch %d loss %.4f", epoch, loss.item())
    acc = accuracy(net, test.images, test.labels)
    if acc < accuracy_floor:
        raise TrainingError(f"teacher underfit: held-out accuracy {acc:.4f} < floor {accuracy_floor}")
    ckpt = Checkpoint.from_network(net, opt, epochs, seed)
    return net.freeze(), ckpt, acc


@torch.no_grad()
def accuracy(net: nn.Module, images: torch.Tensor, labels: torch.Tensor, batch_size: int = 500) -> float:
    was_training = net.training
    net.eval()
    correct = 0
    for start in range(0, images.shape[0], batch_size):
        correct += (net(images[start:start + batch_size]).argmax(1) == labels[start:start + batch_size]).sum().item()
    net.train(was_training)
    return correct / images.shape[0]


# --------------------------------------------------------------------------
# checkpoint container


def _put_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)) + raw)


def _put_tensor(buf: io.BytesIO, name: str, t: torch.Tensor) -> None:
    _put_str(buf, name)
    arr = t.detach().cpu().numpy().astype("<f4")
    buf.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _split_optimizer(state: dict | None) -> tuple[list[tuple[str, torch.Tensor]], dict | None]:
    if state is None:
        return [], None
    tensors, meta = [], {"param_groups": state["param_groups"], "state": {}}
    for idx, entry in state["state"].items():
        meta["state"][str(idx)] = {}
        for key, val in entry.items():
            if torch.is_tensor(val):
                tensors.append((f"optim/{idx}/{key}", val))
                meta["state"][str(idx)][key] = {"tensor": True, "dtype": str(val.dtype)}
            else:
                meta["state"][str(idx)][key] = val
    return tensors, meta


def save_checkpoint(ckpt: Checkpoint | DFNet, path: str | Path) -> None:
    if isinstance(ckpt, nn.Module):
        ckpt = Checkpoint.from_network(ckpt)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION))
    _put_str(buf, ckpt.architecture_id)
    opt_tensors, opt_meta = _split_optimizer(ckpt.optimizer_state)
    segments = [(f"state/{k}", v) for k, v in ckpt.state.items()] + opt_tensors
    buf.write(struct.pack("<I", len(segments)))
    for name, t in segments:
        _put_tensor(buf, name, t)
    _put_str(buf, json.dumps(opt_meta, sort_keys=True))
    buf.write(struct.pack("<IQ", ckpt.epoch, ckpt.seed))
    body = buf.getvalue()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.off = data, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError("unexpected end of checkpoint file")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 6 + 32:
        raise FormatError("unexpected end of checkpoint file")
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r} in checkpoint {path}")
    body, digest = data[:-32], data[-32:]
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"checkpoint {path} is truncated or corrupt (digest mismatch)")
    arch = r.string()
    (count,) = r.unpack("<I")
    segments = OrderedDict()
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        segments[name] = torch.from_numpy(arr.copy())
    opt_meta = json.loads(r.string())
    epoch, seed = r.unpack("<IQ")

    reference = build_network(arch).state_dict()
    state = OrderedDict()
    for k, ref in reference.items():
        key = f"state/{k}"
        if key not in segments:
            raise FormatError(f"checkpoint lacks segment {k!r} for {arch}")
        state[k] = segments[key].to(ref.dtype).reshape(ref.shape)
    opt_state = None
    if opt_meta is not None:
        opt_state = {"param_groups": opt_meta["param_groups"], "state": {}}
        for idx, entry in opt_meta["state"].items():
            restored = {}
            for key, val in entry.items():
                if isinstance(val, dict) and val.get("tensor"):
                    restored[key] = segments[f"optim/{idx}/{key}"].to(getattr(torch, val["dtype"].split(".")[-1]))
                else:
                    restored[key] = val
            opt_state["state"][int(idx)] = restored
    return Checkpoint(arch, state, opt_state, epoch, seed)


def load_network(path: str | Path, role: str | None = None, architecture_id: str | None = None) -> DFNet:
    ckpt = load_checkpoint(path)
    if architecture_id is not None and ckpt.architecture_id != architecture_id:
        raise FormatError(f"checkpoint architecture {ckpt.architecture_id!r} does not match {architecture_id!r}")
    net = ckpt.build(role)
    if net.role == "teacher":
        net.freeze()
    return net


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
