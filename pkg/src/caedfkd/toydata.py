"""Procedurally rendered K-class image datasets (32x32 RGB in [-1, 1]).

Each class is one shape or texture drawn in its own hue band on a random
dark background. A loader for user-supplied CIFAR-format directories is
also provided.
"""

from __future__ import annotations

import colorsys
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, FormatError

SHAPE_NAMES = (
    "circle", "square", "triangle", "ring", "cross",
    "hstripes", "vstripes", "checker", "xmark", "dots",
)

_SIZE = 32
# half-width of the per-image hue jitter around each class hue (class hues are 1/K apart)
HUE_JITTER = 0.04


@dataclass
class ToyDataset:
    images: torch.Tensor  # B x 3 x 32 x 32, float32 in [-1, 1]
    labels: torch.Tensor  # B, int64
    split: str
    recipe_id: str
    seed: int
    class_names: tuple[str, ...]

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def _mask(kind: str, dx, dy, r, period):
    ad, bd = np.abs(dx), np.abs(dy)
    dist = np.hypot(dx, dy)
    box = (ad <= r) & (bd <= r)
    if kind == "circle":
        return dist <= r
    if kind == "square":
        return (ad <= 0.8 * r) & (bd <= 0.8 * r)
    if kind == "triangle":
        return (dy <= 0.8 * r) & (dy >= -r) & (ad <= (dy + r) * 0.55)
    if kind == "ring":
        return (dist <= r) & (dist >= 0.55 * r)
    if kind == "cross":
        return ((ad <= r / 3) & (bd <= r)) | ((bd <= r / 3) & (ad <= r))
    if kind == "hstripes":
        return box & (np.floor((dy + 64) / period) % 2 == 0)
    if kind == "vstripes":
        return box & (np.floor((dx + 64) / period) % 2 == 0)
    if kind == "checker":
        return box & ((np.floor((dx + 64) / period) + np.floor((dy + 64) / period)) % 2 == 0)
    if kind == "xmark":
        return box & ((np.abs(dx - dy) <= 1.6) | (np.abs(dx + dy) <= 1.6))
    if kind == "dots":
        p = period + 1
        mx = (dx + 64) % p - p / 2
        my = (dy + 64) % p - p / 2
        return box & (mx**2 + my**2 <= 1.6**2)
    raise ConfigError(f"unknown shape {kind!r}")


def _render_shapes(rng: np.random.Generator, k: int, label: int, n: int) -> np.ndarray:
    kind = SHAPE_NAMES[label]
    ys, xs = np.mgrid[0:_SIZE, 0:_SIZE].astype(np.float64)
    cx = rng.uniform(11, 21, (n, 1, 1))
    cy = rng.uniform(11, 21, (n, 1, 1))
    r = rng.uniform(7, 11, (n, 1, 1))
    period = rng.integers(3, 5, (n, 1, 1)).astype(np.float64)
    mask = _mask(kind, xs[None] - cx, ys[None] - cy, r, period)

    base_hue = label / k
    fg = np.empty((n, 3))
    bg = np.empty((n, 3))
    for i in range(n):
        hue = (base_hue + rng.uniform(-HUE_JITTER, HUE_JITTER)) % 1.0
        fg[i] = colorsys.hsv_to_rgb(hue, rng.uniform(0.5, 1.0), rng.uniform(0.6, 1.0))
        bg[i] = colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.6), rng.uniform(0.0, 0.35))
    img = np.where(mask[:, None], fg[:, :, None, None], bg[:, :, None, None])
    img = img + rng.normal(0, 0.06, img.shape)
    return np.clip(img * 2 - 1, -1, 1)


_RECIPES = {"shapes": _render_shapes}


def class_names(recipe_id: str, K: int) -> tuple[str, ...]:
    if recipe_id not in _RECIPES:
        raise ConfigError(f"unknown dataset recipe {recipe_id!r}")
    if not 2 <= K <= len(SHAPE_NAMES):
        raise ConfigError(f"K must lie in [2, {len(SHAPE_NAMES)}] for recipe {recipe_id!r}, got {K}")
    return SHAPE_NAMES[:K]


def make_toy_dataset(
    recipe_id: str = "shapes",
    K: int = 10,
    per_class: int = 500,
    seed: int = 0,
    test_fraction: float = 0.2,
) -> tuple[ToyDataset, ToyDataset]:
    """Render ``per_class`` images for each of ``K`` classes and split them.

    Returns ``(train, test)``; both splits are class-balanced and together
    hold exactly ``per_class`` images of each class.
    """
    names = class_names(recipe_id, K)
    if per_class < 10:
        raise ConfigError(f"per_class must be >= 10, got {per_class}")
    n_test = max(1, int(round(per_class * test_fraction)))
    if n_test >= per_class:
        raise ConfigError("test_fraction leaves no training images")
    render = _RECIPES[recipe_id]
    splits = {"train": ([], []), "test": ([], [])}
    for label in range(K):
        rng = np.random.default_rng([seed, label])
        imgs = render(rng, K, label, per_class).astype(np.float32)
        for name, chunk in (("train", imgs[n_test:]), ("test", imgs[:n_test])):
            splits[name][0].append(chunk)
            splits[name][1].append(np.full(len(chunk), label))
    out = []
    for name in ("train", "test"):
        images = np.concatenate(splits[name][0])
        labels = np.concatenate(splits[name][1])
        order = np.random.default_rng([seed, 10_000 + len(name)]).permutation(len(labels))
        out.append(ToyDataset(
            images=torch.from_numpy(images[order]),
            labels=torch.from_numpy(labels[order]).long(),
            split=name,
            recipe_id=recipe_id,
            seed=seed,
            class_names=names,
        ))
    return out[0], out[1]


def _unpickle(path: Path) -> dict:
    try:
        with path.open("rb") as fh:
            return pickle.load(fh, encoding="latin1")
    except (OSError, pickle.UnpicklingError, EOFError) as exc:
        raise FormatError(f"cannot read CIFAR batch {path}: {exc}") from None


def load_cifar_directory(path: str | Path, K: int | None = None) -> tuple[ToyDataset, ToyDataset]:
    """Load a CIFAR-10/100 python-format directory as ``(train, test)``.

    Expects ``data_batch_*`` plus ``test_batch`` (CIFAR-10) or ``train``
    plus ``test`` (CIFAR-100). Only pickles from a trusted source should be
    loaded. With ``K`` the classes are restricted to labels ``< K``.
    """
    root = Path(path)
    train_files = sorted(root.glob("data_batch_*")) or [root / "train"]
    test_file = root / "test_batch" if (root / "test_batch").exists() else root / "test"
    meta = root / "batches.meta" if (root / "batches.meta").exists() else root / "meta"
    if not all(f.exists() for f in [*train_files, test_file]):
        raise FormatError(f"{root} is not a CIFAR-format directory")
    names = None
    if meta.exists():
        m = _unpickle(meta)
        names = m.get("label_names") or m.get("fine_label_names")

    def split(files, name):
        xs, ys = [], []
        for f in files:
            d = _unpickle(f)
            xs.append(np.asarray(d["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
            ys.append(np.asarray(d.get("labels", d.get("fine_labels")), dtype=np.int64))
        x, y = np.concatenate(xs), np.concatenate(ys)
        if K is not None:
            keep = y < K
            x, y = x[keep], y[keep]
        images = torch.from_numpy(x.astype(np.float32) / 127.5 - 1.0)
        k = K or int(y.max()) + 1
        labels_out = tuple(names[:k]) if names else tuple(str(i) for i in range(k))
        return ToyDataset(images, torch.from_numpy(y), name, "cifar-dir", 0, labels_out)

    return split(train_files, "train"), split([test_file], "test")
