"""Offline category embeddings and the noise-diffusion layer that enriches them.

The category embedding matrix is built once, before any training step, by
running a prompt per category through an embedding provider. During
training, every generator step re-draws one noise vector per (category,
source) pair and adds it, scaled by the source magnitude, to the category
row.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, FormatError

EMBEDDING_MAGIC = b"CAEE"
EMBEDDING_VERSION = 1


class PromptMode(str, enum.Enum):
    NAME = "name"
    INDEX = "index"


@dataclass(frozen=True)
class CategorySpec:
    index: int
    name: str = ""


def validate_categories(categories: Sequence[CategorySpec], min_count: int = 1) -> None:
    if len(categories) < min_count:
        raise ConfigError(f"need at least {min_count} categories, got {len(categories)}")
    indices = sorted(c.index for c in categories)
    if indices != list(range(len(categories))):
        raise ConfigError("category indices must be the contiguous range 0..K-1 without duplicates")


def make_categories(names: Sequence[str]) -> list[CategorySpec]:
    return [CategorySpec(i, n) for i, n in enumerate(names)]


def build_prompt(category: CategorySpec, mode: PromptMode | str) -> str:
    mode = PromptMode(mode)
    if mode is PromptMode.NAME:
        if not category.name:
            raise ConfigError(
                f"category {category.index} has an empty name; use prompt mode 'index'"
            )
        return f"a photo of {category.name}"
    return f"a photo of {category.index}"


# --------------------------------------------------------------------------
# providers


class EmbeddingProvider(Protocol):
    provider_id: str
    dim: int
    calls: int

    def embed(self, prompt: str, category: CategorySpec) -> np.ndarray: ...


class StubProvider:
    """Deterministic hash-to-vector provider.

    The prompt text and provider seed are hashed with SHA-256; the digest
    seeds a Gaussian draw which is normalized to unit length. No model
    weights are involved, so identical prompts always map to identical
    vectors on every platform.
    """

    def __init__(self, seed: int = 0, dim: int = 64):
        if dim < 2:
            raise ConfigError(f"stub provider dimension must be >= 2, got {dim}")
        self.seed = int(seed)
        self.dim = int(dim)
        self.provider_id = f"stub:{self.seed}:{self.dim}"
        self.calls = 0

    def embed(self, prompt: str, category: CategorySpec | None = None) -> np.ndarray:
        self.calls += 1
        digest = hashlib.sha256(f"{self.seed}\x00{prompt}".encode("utf-8")).digest()
        rng = np.random.default_rng(np.frombuffer(digest, dtype=np.uint32))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)


def provider_stub(seed: int, dim: int) -> StubProvider:
    return StubProvider(seed, dim)


class FileProvider:
    """Serves precomputed rows from an embedding file, keyed by category index."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.matrix, self.names = read_embedding_file(self.path)
        self.dim = self.matrix.shape[1]
        self.provider_id = f"file:{self.path.name}"
        self.calls = 0

    def embed(self, prompt: str, category: CategorySpec) -> np.ndarray:
        self.calls += 1
        if category.index >= self.matrix.shape[0]:
            raise FormatError(
                f"missing category embedding for category {category.index} in {self.path}"
            )
        return self.matrix[category.index].astype(np.float64)


# --------------------------------------------------------------------------
# embedding space


@dataclass(frozen=True)
class CategoryEmbeddingSpace:
    embeddings: np.ndarray  # K x D, float32
    provider_id: str
    prompt_mode: PromptMode
    categories: tuple[CategorySpec, ...]

    def __post_init__(self):
        e = self.embeddings
        if e.ndim != 2 or e.shape[0] != len(self.categories):
            raise ConfigError(
                f"embedding matrix shape {e.shape} does not match {len(self.categories)} categories"
            )
        if not np.isfinite(e).all():
            bad = int(np.where(~np.isfinite(e).all(axis=1))[0][0])
            raise FormatError(f"non-finite embedding for category {bad}")
        e.setflags(write=False)

    @property
    def num_categories(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def rms(self) -> float:
        """Root mean square of the row L2 norms (1.0 for unit-norm rows)."""
        return float(np.sqrt(np.mean(np.sum(self.embeddings.astype(np.float64) ** 2, axis=1))))


def init_embedding_space(
    categories: Sequence[CategorySpec],
    provider: EmbeddingProvider,
    mode: PromptMode | str = PromptMode.NAME,
) -> CategoryEmbeddingSpace:
    """Call ``provider`` exactly once per category and stack the results."""
    mode = PromptMode(mode)
    validate_categories(categories)
    ordered = sorted(categories, key=lambda c: c.index)
    rows = []
    for cat in ordered:
        prompt = build_prompt(cat, mode)
        try:
            v = np.asarray(provider.embed(prompt, cat), dtype=np.float64)
        except FormatError:
            raise
        except Exception as exc:
            raise FormatError(f"provider failed on category {cat.index}: {exc}") from exc
        if v.shape != (provider.dim,):
            raise FormatError(
                f"provider returned shape {v.shape} for category {cat.index}, expected ({provider.dim},)"
            )
        if rows and v.shape != rows[0].shape:
            raise FormatError(f"provider dimension changed at category {cat.index}")
        rows.append(v)
    return CategoryEmbeddingSpace(
        embeddings=np.stack(rows).astype(np.float32),
        provider_id=provider.provider_id,
        prompt_mode=mode,
        categories=tuple(ordered),
    )


# --------------------------------------------------------------------------
# embedding file I/O


def write_embedding_file(space: CategoryEmbeddingSpace, path: str | Path) -> None:
    k, d = space.embeddings.shape
    parts = [EMBEDDING_MAGIC, struct.pack("<HII", EMBEDDING_VERSION, k, d)]
    parts.append(np.ascontiguousarray(space.embeddings, dtype="<f4").tobytes())
    for cat in space.categories:
        raw = cat.name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    Path(path).write_bytes(b"".join(parts))


def read_embedding_file(path: str | Path) -> tuple[np.ndarray, list[str]]:
    data = Path(path).read_bytes()
    eof = "unexpected end of embedding file"
    if len(data) < 14:
        raise FormatError(eof)
    if data[:4] != EMBEDDING_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r} in embedding file {path}")
    version, k, d = struct.unpack_from("<HII", data, 4)
    if version != EMBEDDING_VERSION:
        raise FormatError(f"unsupported embedding file version {version}")
    off = 14
    nbytes = 4 * k * d
    if len(data) < off + nbytes:
        raise FormatError(eof)
    matrix = np.frombuffer(data, dtype="<f4", count=k * d, offset=off).reshape(k, d).astype(np.float32)
    off += nbytes
    names = []
    for _ in range(k):
        if len(data) < off + 4:
            raise FormatError(eof)
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        if len(data) < off + n:
            raise FormatError(eof)
        names.append(data[off:off + n].decode("utf-8"))
        off += n
    return matrix, names


def ingest_embedding_file(
    path: str | Path,
    categories: Sequence[CategorySpec],
    prompt_mode: PromptMode | str = PromptMode.NAME,
) -> CategoryEmbeddingSpace:
    validate_categories(categories)
    matrix, names = read_embedding_file(path)
    ordered = sorted(categories, key=lambda c: c.index)
    if matrix.shape[0] < len(ordered):
        raise FormatError(
            f"missing category embedding: file has {matrix.shape[0]} rows for {len(ordered)} categories"
        )
    if matrix.shape[0] > len(ordered):
        raise FormatError(
            f"embedding file has {matrix.shape[0]} rows but only {len(ordered)} categories"
        )
    for cat, row, fname in zip(ordered, matrix, names):
        if not np.isfinite(row).all():
            raise FormatError(f"non-finite embedding for category {cat.index} ({cat.name or fname})")
        if fname and cat.name and fname != cat.name:
            raise FormatError(
                f"category {cat.index} is named {cat.name!r} but the file row is {fname!r}"
            )
    return CategoryEmbeddingSpace(
        embeddings=matrix,
        provider_id=f"file:{Path(path).name}",
        prompt_mode=PromptMode(prompt_mode),
        categories=tuple(ordered),
    )


# --------------------------------------------------------------------------
# noise sources


class NoiseFamily(str, enum.Enum):
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"
    LAPLACE = "laplace"
    BERNOULLI_MASK = "bernoulli-mask"


_FAMILY_PARAMS = {
    NoiseFamily.GAUSSIAN: ("mean", "std"),
    NoiseFamily.UNIFORM: ("low", "high"),
    NoiseFamily.LAPLACE: ("loc", "scale"),
    NoiseFamily.BERNOULLI_MASK: ("p",),
}


@dataclass(frozen=True)
class NoiseSourceSpec:
    """One noise source: a distribution family, its parameters, and a magnitude.

    ``bernoulli-mask`` draws +1 with probability ``p`` and -1 otherwise.
    ``magnitude`` is a scalar or a length-D vector.
    """

    source_index: int
    family: NoiseFamily
    params: tuple[tuple[str, float], ...]
    magnitude: float | tuple[float, ...] = 1.0

    @classmethod
    def make(cls, source_index: int, family: str, magnitude=1.0, **params) -> "NoiseSourceSpec":
        fam = NoiseFamily(family)
        expected = _FAMILY_PARAMS[fam]
        if set(params) != set(expected):
            raise ConfigError(f"{fam.value} source needs parameters {expected}, got {sorted(params)}")
        if not isinstance(magnitude, (int, float)):
            magnitude = tuple(float(m) for m in magnitude)
        else:
            magnitude = float(magnitude)
        spec = cls(source_index, fam, tuple((k, float(params[k])) for k in expected), magnitude)
        spec.check()
        return spec

    @property
    def param_dict(self) -> dict[str, float]:
        return dict(self.params)

    @property
    def key(self) -> tuple:
        return (self.family, self.params)

    def magnitude_array(self) -> np.ndarray:
        return np.asarray(self.magnitude, dtype=np.float64)

    def check(self) -> None:
        p = self.param_dict
        if self.family is NoiseFamily.GAUSSIAN and not p["std"] > 0:
            raise ConfigError("gaussian std must be > 0")
        if self.family is NoiseFamily.UNIFORM and not p["high"] > p["low"]:
            raise ConfigError("uniform source needs high > low")
        if self.family is NoiseFamily.LAPLACE and not p["scale"] > 0:
            raise ConfigError("laplace scale must be > 0")
        if self.family is NoiseFamily.BERNOULLI_MASK and not 0.0 < p["p"] < 1.0:
            raise ConfigError("bernoulli-mask p must lie in (0, 1)")
        m = self.magnitude_array()
        if not np.isfinite(m).all() or (m < 0).any():
            raise ConfigError(f"noise source {self.source_index}: magnitude must be finite and >= 0")

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        p = self.param_dict
        if self.family is NoiseFamily.GAUSSIAN:
            return rng.normal(p["mean"], p["std"], size)
        if self.family is NoiseFamily.UNIFORM:
            return rng.uniform(p["low"], p["high"], size)
        if self.family is NoiseFamily.LAPLACE:
            return rng.laplace(p["loc"], p["scale"], size)
        return np.where(rng.random(size) < p["p"], 1.0, -1.0)

    def moments(self) -> tuple[float, float]:
        """Analytic (mean, variance) of one unscaled draw."""
        p = self.param_dict
        if self.family is NoiseFamily.GAUSSIAN:
            return p["mean"], p["std"] ** 2
        if self.family is NoiseFamily.UNIFORM:
            return (p["low"] + p["high"]) / 2, (p["high"] - p["low"]) ** 2 / 12
        if self.family is NoiseFamily.LAPLACE:
            return p["loc"], 2 * p["scale"] ** 2
        mean = 2 * p["p"] - 1
        return mean, 1 - mean**2


# Sources beyond the first four exist so that N can be swept up to 8.
DEFAULT_SOURCE_POOL: tuple[tuple[str, dict], ...] = (
    ("gaussian", {"mean": 0.0, "std": 1.0}),
    ("uniform", {"low": -1.0, "high": 1.0}),
    ("laplace", {"loc": 0.0, "scale": 1.0}),
    ("bernoulli-mask", {"p": 0.5}),
    ("gaussian", {"mean": 0.0, "std": 0.5}),
    ("uniform", {"low": -2.0, "high": 2.0}),
    ("laplace", {"loc": 0.0, "scale": 0.5}),
    ("bernoulli-mask", {"p": 0.25}),
)


def default_sources(n: int, magnitude: float) -> list[NoiseSourceSpec]:
    if not 1 <= n <= len(DEFAULT_SOURCE_POOL):
        raise ConfigError(f"number of noise sources must be in [1, {len(DEFAULT_SOURCE_POOL)}], got {n}")
    return [
        NoiseSourceSpec.make(i + 1, fam, magnitude=magnitude, **params)
        for i, (fam, params) in enumerate(DEFAULT_SOURCE_POOL[:n])
    ]


def validate_sources(sources: Sequence[NoiseSourceSpec], dim: int | None = None) -> None:
    if len(sources) < 1:
        raise ConfigError("at least one noise source is required")
    seen = {}
    for s in sources:
        s.check()
        if s.key in seen:
            raise ConfigError(
                f"duplicate noise source: sources {seen[s.key]} and {s.source_index} "
                f"are both {s.family.value}{dict(s.params)}"
            )
        seen[s.key] = s.source_index
        m = s.magnitude_array()
        if dim is not None and m.ndim == 1 and m.shape[0] != dim:
            raise ConfigError(
                f"noise source {s.source_index} magnitude has length {m.shape[0]}, embedding dim is {dim}"
            )


@dataclass(frozen=True)
class DiffusedEmbeddingSet:
    tensor: np.ndarray  # K x N x D, float64
    space: CategoryEmbeddingSpace
    sources: tuple[NoiseSourceSpec, ...]
    draw_seed: int
    step: int = 0
    noise: np.ndarray | None = field(default=None, repr=False)  # unscaled q, K x N x D

    @property
    def num_sources(self) -> int:
        return self.tensor.shape[1]


def cend_diffuse(
    space: CategoryEmbeddingSpace,
    sources: Sequence[NoiseSourceSpec],
    seed: int,
    step: int = 0,
    stream: int = 0,
) -> DiffusedEmbeddingSet:
    """Diffuse every category row with a fresh draw from each source.

    Row ``[k, n]`` is ``E_off[k] + M_n * q`` where ``q`` is drawn from source
    ``n`` by a generator seeded with ``(seed, step, k, n)``. A nonzero
    ``stream`` selects an independent family of draws for the same step.
    """
    validate_sources(sources, space.dim)
    k_count, dim = space.embeddings.shape
    base = space.embeddings.astype(np.float64)
    noise = np.empty((k_count, len(sources), dim))
    for k in range(k_count):
        for n, src in enumerate(sources):
            key = [int(seed), int(step), k, n] + ([int(stream)] if stream else [])
            rng = np.random.default_rng(key)
            noise[k, n] = src.sample(rng, dim)
    if not np.isfinite(noise).all():
        raise FormatError("non-finite noise draw in diffusion layer")
    mags = np.stack([np.broadcast_to(s.magnitude_array(), (dim,)) for s in sources])
    tensor = base[:, None, :] + mags[None, :, :] * noise
    return DiffusedEmbeddingSet(tensor, space, tuple(sources), int(seed), int(step), noise)


def orthonormal_projection(d_in: int, d_out: int, seed: int) -> np.ndarray:
    """Seeded ``d_out x d_in`` matrix with orthonormal rows or columns.

    Whichever side is smaller gets orthonormal vectors, so the map is an
    isometry when ``d_out >= d_in`` and a co-isometry otherwise.
    """
    rng = np.random.default_rng([int(seed), d_in, d_out])
    a = rng.standard_normal((max(d_in, d_out), min(d_in, d_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if d_out >= d_in else q.T
