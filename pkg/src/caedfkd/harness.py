"""Experiment orchestration: ablation sweeps, timing and report emission.

A :class:`Lab` owns the toy datasets and pretrained teachers for a set of
seeds so that sweeps reuse them across cells. Reports are plain files: a
JSON-lines metrics stream, a CSV summary and PNG plots.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import RunConfig, save_config
from .diagnostics import METRIC_KEYS, MetricsRecord, evaluate_accuracy, low_confidence_profile
from .errors import CAEError, ConfigError, OutputError
from .nets import pretrain_teacher
from .toydata import ToyDataset, make_toy_dataset
from .trainer import DistillResult, build_space, distill

__all__ = [
    "AblationAxis", "AblationPlan", "Lab", "SpeedupResult",
    "run_ablation", "measure_speedup", "emit_report", "read_metrics",
    "evaluate_accuracy", "low_confidence_profile", "make_toy_dataset",
]

log = logging.getLogger(__name__)


class AblationAxis(str, enum.Enum):
    CEND_ON_OFF = "cend_on_off"
    CNCL_ON_OFF = "cncl_on_off"
    N_SOURCES = "n_sources"
    PROVIDER = "provider"
    PROMPT_MODE = "prompt_mode"
    LAMBDA_SWEEP = "lambda_sweep"
    COMPONENTS = "components"


# component presets for the toggle table: base generator input is Gaussian
COMPONENTS = {
    "base": {"embeddings.strategy": "gaussian", "student.cncl": False},
    "base+cend": {"embeddings.strategy": "cend", "student.cncl": False},
    "base+cend+cncl": {"embeddings.strategy": "cend", "student.cncl": True},
}


def _provider_overrides(value: str) -> dict[str, Any]:
    kind, _, arg = str(value).partition(":")
    if kind == "stub":
        return {"embeddings.provider": "stub", "embeddings.provider_seed": int(arg or 0)}
    if kind == "file":
        if not arg:
            raise ConfigError("provider value 'file' needs a path: file:<path>")
        return {"embeddings.provider": "file", "embeddings.path": arg}
    raise ConfigError(f"unknown provider value {value!r}; use stub[:seed] or file:<path>")


def cell_overrides(axis: AblationAxis, value) -> dict[str, Any]:
    """Dotted config overrides that realise one value of an ablation axis."""
    if axis is AblationAxis.CEND_ON_OFF:
        return {"embeddings.strategy": "cend" if _as_bool(value) else "gaussian"}
    if axis is AblationAxis.CNCL_ON_OFF:
        return {"student.cncl": _as_bool(value)}
    if axis is AblationAxis.N_SOURCES:
        return {"cend.n_sources": int(value), "cend.sources": None, "cend.n_per_step": None}
    if axis is AblationAxis.PROVIDER:
        return _provider_overrides(value)
    if axis is AblationAxis.PROMPT_MODE:
        return {"embeddings.prompt_mode": str(value)}
    if axis is AblationAxis.LAMBDA_SWEEP:
        if isinstance(value, dict):
            unknown = set(value) - {"lambda_bn", "lambda_adv"}
            if unknown:
                raise ConfigError(f"lambda_sweep values take lambda_bn/lambda_adv, got {sorted(unknown)}")
            return {f"generator.{k}": float(v) for k, v in value.items()}
        lam_bn, lam_adv = value
        return {"generator.lambda_bn": float(lam_bn), "generator.lambda_adv": float(lam_adv)}
    if axis is AblationAxis.COMPONENTS:
        if value not in COMPONENTS:
            raise ConfigError(f"components value must be one of {list(COMPONENTS)}, got {value!r}")
        return dict(COMPONENTS[value])
    raise ConfigError(f"unknown ablation axis {axis!r}")


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if value in ("on", "true", 1):
        return True
    if value in ("off", "false", 0):
        return False
    raise ConfigError(f"on/off axis value must be boolean or on/off, got {value!r}")


def _label(value) -> str:
    if isinstance(value, dict):
        return ",".join(f"{k}={v}" for k, v in sorted(value.items()))
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class AblationPlan:
    """One axis swept over ``values``; every cell runs the same seed set."""

    axis: AblationAxis | str
    values: list
    base: RunConfig
    repetitions: int = 1
    overrides: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        try:
            self.axis = AblationAxis(self.axis)
        except ValueError:
            raise ConfigError(f"unknown ablation axis {self.axis!r}; one of {[a.value for a in AblationAxis]}") from None
        if not self.values:
            raise ConfigError("ablation plan has an empty values list")
        if self.repetitions < 1:
            raise ConfigError("ablation repetitions must be >= 1")
        if self.overrides:
            self.base = self.base.replace(self.overrides)

    @property
    def seeds(self) -> list[int]:
        return [self.base.seed + r for r in range(self.repetitions)]

    def cells(self):
        """Yield ``(value, repetition, overrides)`` in report order."""
        for value in self.values:
            over = cell_overrides(self.axis, value)
            for rep, seed in enumerate(self.seeds):
                yield value, rep, {**over, "seed": seed}

    @classmethod
    def from_dict(cls, raw: dict, base: RunConfig) -> "AblationPlan":
        if not isinstance(raw, dict):
            raise ConfigError("ablation plan must be a mapping")
        unknown = set(raw) - {"axis", "values", "repetitions", "overrides"}
        if unknown:
            raise ConfigError(f"unknown ablation plan key {sorted(unknown)[0]}")
        if "axis" not in raw:
            raise ConfigError("ablation plan needs an 'axis'")
        return cls(raw["axis"], list(raw.get("values") or []), base,
                   int(raw.get("repetitions", 1)), dict(raw.get("overrides") or {}))


class Lab:
    """Caches toy datasets and pretrained teachers keyed by their configs."""

    def __init__(self):
        self._data: dict[tuple, tuple[ToyDataset, ToyDataset]] = {}
        self._teachers: dict[tuple, tuple[Any, float]] = {}

    def data(self, cfg: RunConfig) -> tuple[ToyDataset, ToyDataset]:
        d = cfg.data
        key = (d.recipe, d.K, d.per_class, d.test_fraction, cfg.seed)
        if key not in self._data:
            self._data[key] = make_toy_dataset(d.recipe, d.K, d.per_class, cfg.seed, d.test_fraction)
        return self._data[key]

    def teacher(self, cfg: RunConfig):
        """Return ``(frozen teacher, held-out accuracy)``, pretraining on first use."""
        t = cfg.teacher
        d = cfg.data
        key = (d.recipe, d.K, d.per_class, d.test_fraction, cfg.seed, t.epochs, t.lr, t.batch_size, t.accuracy_floor)
        if key not in self._teachers:
            train, test = self.data(cfg)
            net, _, acc = pretrain_teacher(train, test, epochs=t.epochs, lr=t.lr, batch_size=t.batch_size,
                                           seed=cfg.seed, accuracy_floor=t.accuracy_floor, num_classes=d.K)
            self._teachers[key] = (net, acc)
        return self._teachers[key]

    def put_teacher(self, cfg: RunConfig, net, acc: float) -> None:
        t = cfg.teacher
        d = cfg.data
        key = (d.recipe, d.K, d.per_class, d.test_fraction, cfg.seed, t.epochs, t.lr, t.batch_size, t.accuracy_floor)
        self._teachers[key] = (net, acc)

    def run(self, cfg: RunConfig, run_dir: str | Path | None = None) -> DistillResult:
        train, test = self.data(cfg)
        teacher, acc = self.teacher(cfg)
        space = build_space(cfg, train.class_names) if cfg.embeddings.strategy == "cend" else None
        result = distill(cfg, teacher, test, space, run_dir=run_dir)
        result.extras["teacher_acc"] = acc
        return result


# --------------------------------------------------------------------------
# ablation


REPORT_COLUMNS = (
    "axis", "value", "repetition", "seed", "status", "final_acc", "best_acc", "teacher_acc",
    "final_l_g", "final_l_s", "mean_epoch_seconds", "epochs", "config_digest", "error",
)


def run_ablation(plan: AblationPlan, out_dir: str | Path | None = None, lab: Lab | None = None) -> list[dict]:
    """Run every (value, repetition) cell of ``plan`` and return report rows.

    A crashing cell becomes a row with ``status="failed"`` and the error
    message; the sweep carries on. With ``out_dir`` each cell writes its
    own report under ``cells/`` and the table goes to ``ablation.csv``.
    """
    lab = lab or Lab()
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for index, (value, rep, overrides) in enumerate(plan.cells()):
        row = dict.fromkeys(REPORT_COLUMNS, "")
        row.update(axis=plan.axis.value, value=_label(value), repetition=rep, seed=overrides["seed"])
        try:
            cfg = plan.base.replace(overrides)
            row["config_digest"] = cfg.digest()
            cell_dir = out / "cells" / f"{index:03d}" if out is not None else None
            result = lab.run(cfg)
            if cell_dir is not None:
                emit_report(result.records, cell_dir)
                save_config(cfg, cell_dir / "config.yaml")
            recs = result.records
            row.update(
                status="ok",
                final_acc=recs[-1].student_acc,
                best_acc=max(r.student_acc for r in recs),
                teacher_acc=result.extras.get("teacher_acc", ""),
                final_l_g=recs[-1].l_g,
                final_l_s=recs[-1].l_s,
                mean_epoch_seconds=float(np.mean([r.epoch_seconds for r in recs])),
                epochs=len(recs),
            )
        except Exception as exc:  # a failed cell must not abort the sweep
            log.warning("ablation cell %s=%s rep %d failed: %s", plan.axis.value, _label(value), rep, exc)
            log.debug("%s", traceback.format_exc())
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    if out is not None:
        write_ablation_table(rows, out)
    return rows


def write_ablation_table(rows: list[dict], out_dir: str | Path) -> Path:
    out = _ensure_dir(out_dir)
    path = out / "ablation.csv"
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    _plot_ablation(rows, out / "ablation.png")
    return path


def summarize_cells(rows: list[dict]) -> dict[str, float]:
    """Mean final accuracy per value over successful cells (nan if none)."""
    by_value: dict[str, list[float]] = {}
    for row in rows:
        by_value.setdefault(row["value"], [])
        if row["status"] == "ok":
            by_value[row["value"]].append(float(row["final_acc"]))
    return {v: float(np.mean(a)) if a else math.nan for v, a in by_value.items()}


# --------------------------------------------------------------------------
# timing


@dataclass
class SpeedupResult:
    ratio: float
    seconds_a: list[float]
    seconds_b: list[float]


def measure_speedup(config_a: RunConfig, config_b: RunConfig, epochs: int = 3, lab: Lab | None = None) -> SpeedupResult:
    """Mean epoch wall-clock of ``config_a`` over ``config_b``.

    Both configs run for ``epochs`` epochs; the first epoch is a warm-up
    and is dropped from the means.
    """
    if epochs < 3:
        raise ConfigError("measure_speedup needs epochs >= 3 (first epoch is warm-up)")
    lab = lab or Lab()
    times = []
    for cfg in (config_a, config_b):
        result = lab.run(cfg.replace({"student.epochs": epochs}))
        times.append([r.epoch_seconds for r in result.records])
    mean_a, mean_b = (float(np.mean(t[1:])) for t in times)
    if not (mean_a > 0 and mean_b > 0) or any(s <= 0 for t in times for s in t):
        raise CAEError("non-positive epoch timing measured")
    return SpeedupResult(mean_a / mean_b, times[0], times[1])


# --------------------------------------------------------------------------
# reports


def _ensure_dir(path: str | Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create report directory {path}: {exc.strerror or exc}") from None
    if not path.is_dir():
        raise OutputError(f"report path {path} is not a directory")
    return path


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from None


def emit_report(records: Sequence[MetricsRecord], path: str | Path) -> list[Path]:
    """Write ``metrics.jsonl``, ``timing.jsonl``, ``summary.csv`` and plots into ``path``.

    The metrics stream depends only on the records, so re-emitting the
    same records reproduces it byte for byte.
    """
    if not records:
        raise ConfigError("cannot emit a report without records")
    epochs = [r.epoch for r in records]
    if any(b <= a for a, b in zip(epochs, epochs[1:])):
        raise ConfigError("record epochs must be strictly increasing")
    out = _ensure_dir(path)
    metrics = out / "metrics.jsonl"
    timing = out / "timing.jsonl"
    summary = out / "summary.csv"
    _write(metrics, "".join(r.stream_line() + "\n" for r in records))
    _write(timing, "".join(r.timing_line() + "\n" for r in records))
    k = max(len(r.low_conf) for r in records)
    cols = [c for c in METRIC_KEYS if c != "low_conf"] + ["epoch_seconds"] + [f"low_conf_{i}" for i in range(k)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for r in records:
        writer.writerow([getattr(r, c) for c in cols[: -k or None]] + list(r.low_conf) + [""] * (k - len(r.low_conf)))
    _write(summary, buf.getvalue())
    plots = [out / "loss_curves.png", out / "low_confidence.png"]
    _plot_losses(records, plots[0])
    _plot_low_conf(records[-1], plots[1])
    return [metrics, timing, summary, *plots]


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    """Parse a metrics stream (and its sibling ``timing.jsonl`` when present)."""
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.jsonl"
    if not path.exists():
        raise ConfigError(f"no metrics stream at {path}")
    seconds = {}
    timing = path.with_name("timing.jsonl")
    if timing.exists():
        for line in timing.read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                seconds[d["epoch"]] = d["epoch_seconds"]
    records = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            epoch = json.loads(line)["epoch"]
            records.append(MetricsRecord.from_line(line, seconds.get(epoch, 0.0)))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}:{n}: malformed metrics line ({exc})") from None
    return records


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: Path) -> None:
    plt = _pyplot()
    try:
        fig.savefig(path, dpi=90)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from None
    finally:
        plt.close(fig)


def _plot_losses(records: Sequence[MetricsRecord], path: Path) -> None:
    plt = _pyplot()
    ep = [r.epoch for r in records]
    fig, (ax_g, ax_s, ax_a) = plt.subplots(1, 3, figsize=(12, 3.6))
    for key in ("l_ce", "l_bn", "l_adv", "l_g"):
        ax_g.plot(ep, [getattr(r, key) for r in records], label=key)
    for key in ("l_kl", "l_cncl", "l_s"):
        ax_s.plot(ep, [getattr(r, key) for r in records], label=key)
    ax_a.plot(ep, [r.student_acc for r in records], color="k")
    ax_a.set_ylim(0, 1)
    ax_g.set_title("generator")
    ax_s.set_title("student")
    ax_a.set_title("student accuracy")
    for ax in (ax_g, ax_s, ax_a):
        ax.set_xlabel("epoch")
    ax_g.legend(fontsize=7)
    ax_s.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def _plot_low_conf(record: MetricsRecord, path: Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(range(len(record.low_conf)), record.low_conf, color="tab:red")
    ax.set_ylim(0, 1)
    ax.set_xlabel("category")
    ax.set_ylabel("low-confidence proportion")
    ax.set_title(f"epoch {record.epoch}")
    fig.tight_layout()
    _save(fig, path)


def _plot_ablation(rows: list[dict], path: Path) -> None:
    plt = _pyplot()
    means = summarize_cells(rows)
    fig, ax = plt.subplots(figsize=(max(4, 1 + len(means)), 3.2))
    labels = list(means)
    ax.bar(range(len(labels)), [0 if math.isnan(means[v]) else means[v] for v in labels])
    ax.set_xticks(range(len(labels)), labels, rotation=20, fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel("mean final accuracy")
    fig.tight_layout()
    _save(fig, path)
