"""Run metrics: accuracy, log-error regression scores, loss distributions,
and the files a run writes for downstream plotting."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .data import write_pgm
from .errors import ConfigurationError, DataError
from .protocol import FeatureRecord


class Task(str, Enum):
    CLASSIFICATION = "classification"
    REGRESSION = "regression"


def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    yhat = np.asarray(yhat, dtype=np.float64).reshape(-1)
    if y.shape != yhat.shape:
        raise DataError(f"length mismatch: {y.size} labels vs {yhat.size} predictions")
    if y.size == 0:
        raise DataError("metrics of an empty sample")
    return y, yhat


def classification_metrics(yhat, y, threshold: float = 0.5) -> float:
    """Accuracy in percent of thresholded predictions."""
    y, yhat = _pair(y, yhat)
    hits = np.count_nonzero((yhat >= threshold) == (y == 1))
    return 100.0 * hits / y.size


def regression_metrics(y, yhat) -> dict[str, float]:
    """MSLE (natural log), RMSLE and sMAPE in percent, all in float64."""
    y, yhat = _pair(y, yhat)
    bad = np.flatnonzero((y <= -1) | (yhat <= -1) | ~np.isfinite(y) | ~np.isfinite(yhat))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"index {i}: values must be finite and > -1 (y={y[i]}, yhat={yhat[i]})")
    msle = float(np.mean((np.log1p(y) - np.log1p(yhat)) ** 2))
    denom = np.abs(y) + np.abs(yhat)
    ratio = np.divide(np.abs(y - yhat), denom, out=np.zeros_like(denom), where=denom > 0)
    return {"msle": msle, "rmsle": float(np.sqrt(msle)), "smape": float(100.0 * ratio.mean())}


def distribution_export(losses, bins: int = 50) -> dict[str, list[tuple[float, float]]]:
    """Empirical CDF (ties collapsed to their last fraction) and density histogram."""
    x = np.sort(np.asarray(losses, dtype=np.float64).reshape(-1))
    if x.size == 0:
        raise DataError("no losses to summarize")
    if not np.all(np.isfinite(x)):
        raise DataError("losses must be finite")
    if bins < 1:
        raise ConfigurationError("bins must be positive")
    n = x.size
    last = np.append(x[1:] != x[:-1], True)
    cdf = [(float(v), (k + 1) / n) for k, v in enumerate(x) if last[k]]
    lo, hi = x[0], x[-1]
    if lo == hi:
        # one bin of unit width centred on the value
        return {"cdf": cdf, "pdf": [(float(lo), 1.0)]}
    density, edges = np.histogram(x, bins=bins, range=(lo, hi), density=True)
    centers = (edges[:-1] + edges[1:]) / 2
    return {"cdf": cdf, "pdf": [(float(c), float(d)) for c, d in zip(centers, density)]}


def feature_image(feature: np.ndarray, channel: int = 0) -> np.ndarray:
    """One channel min-max scaled to uint8."""
    f = np.asarray(feature, dtype=np.float64)
    if f.ndim == 2:
        f = f[..., None]
    if f.ndim != 3:
        raise ConfigurationError(f"feature of rank {f.ndim} is not an image")
    if not 0 <= channel < f.shape[2]:
        raise ConfigurationError(f"channel {channel} out of range for {f.shape[2]} channels")
    c = f[..., channel]
    lo, hi = c.min(), c.max()
    if hi == lo:
        return np.zeros(c.shape, dtype=np.uint8)
    return np.rint((c - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_feature_image(record: FeatureRecord, channel: int, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(path, feature_image(record.feature, channel))
    return path


@dataclass
class MetricsReport:
    task: Task
    per_epoch: list[dict] = field(default_factory=list)
    final: dict[str, float] = field(default_factory=dict)
    per_sample_losses: list[float] = field(default_factory=list)
    label: str = ""
    extra: dict = field(default_factory=dict)

    def distribution(self, bins: int = 50):
        return distribution_export(self.per_sample_losses, bins)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "task": Task(self.task).value,
            "final": self.final,
            "per_epoch": self.per_epoch,
            "n_test": len(self.per_sample_losses),
            **self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        known = {"label", "task", "final", "per_epoch", "n_test"}
        return cls(
            Task(d["task"]),
            d.get("per_epoch", []),
            d.get("final", {}),
            label=d.get("label", ""),
            extra={k: v for k, v in d.items() if k not in known},
        )

    @classmethod
    def load(cls, path) -> "MetricsReport":
        path = Path(path)
        if path.is_dir():
            path = path / "metrics.json"
        report = cls.from_dict(json.loads(path.read_text()))
        losses = path.parent / "per_sample_losses.csv"
        if losses.exists():
            with open(losses, newline="") as fh:
                report.per_sample_losses = [float(r["loss"]) for r in csv.DictReader(fh)]
        if not report.label:
            report.label = path.parent.name
        return report

    def write(self, out, sample_ids=None, bins: int = 50) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        ids = sample_ids if sample_ids is not None else range(len(self.per_sample_losses))
        _write_csv(out / "per_sample_losses.csv", ["sample_id", "loss"], zip(ids, map(repr, self.per_sample_losses)))
        if self.per_sample_losses:
            dist = self.distribution(bins)
            _write_csv(out / "cdf.csv", ["loss", "fraction"], ((repr(v), repr(p)) for v, p in dist["cdf"]))
            _write_csv(out / "pdf.csv", ["bin_center", "density"], ((repr(c), repr(d)) for c, d in dist["pdf"]))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_epochs_csv(path, per_epoch: list[dict]) -> None:
    cols = ["epoch", "loss", "accuracy", "val_loss", "val_accuracy"]
    used = [c for c in cols if any(c in e for e in per_epoch)] or cols[:2]
    _write_csv(Path(path), used, ([repr(e[c]) if c in e else "" for c in used] for e in per_epoch))
