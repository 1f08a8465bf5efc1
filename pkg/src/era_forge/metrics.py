"""Era label granularity and the tolerance accuracy ACC_x."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Granularity:
    name: str
    n_years: int
    base_year: int
    n_classes: int

    @property
    def span(self) -> tuple[int, int]:
        """Inclusive first and last year covered."""
        return self.base_year, self.base_year + self.n_classes * self.n_years - 1

    @property
    def tolerances(self) -> tuple[int, ...]:
        # 8-class tables stop at ACC_2
        return (0, 1, 2) if self.n_years >= 10 else (0, 1, 2, 3)

    def to_dict(self) -> dict:
        return {"name": self.name, "n_years": self.n_years, "base_year": self.base_year, "n_classes": self.n_classes}


YEAR = Granularity("year", 1, 1947, 64)
DECADE = Granularity("decade", 10, 1940, 8)


def granularity(name: str, base_year: int | None = None, n_classes: int | None = None) -> Granularity:
    proto = {"year": YEAR, "decade": DECADE}.get(name)
    if proto is None:
        raise ValueError(f"unknown granularity {name!r}; expected 'year' or 'decade'")
    return Granularity(name, proto.n_years, base_year if base_year is not None else proto.base_year,
                       n_classes if n_classes is not None else proto.n_classes)


def year_to_class(year: int, gran: Granularity = YEAR) -> int:
    lo, hi = gran.span
    if not lo <= year <= hi:
        raise ValueError(f"year {year} outside the valid span {lo}-{hi} for {gran.name} granularity")
    return (int(year) - gran.base_year) // gran.n_years


def class_to_year(index: int, gran: Granularity = YEAR) -> float:
    """Midpoint year of a class."""
    return gran.base_year + index * gran.n_years + (gran.n_years - 1) / 2.0


def acc_x(truth: Sequence[int], pred: Sequence[int], x: float) -> float:
    """Accuracy with +-x units of tolerance; x=0 is exact-match rate."""
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"length mismatch: {truth.shape} vs {pred.shape}")
    if x < 0:
        raise ValueError("tolerance must be non-negative")
    if truth.size == 0:
        raise ValueError("acc_x of an empty prediction set")
    if x == 0:
        return float(np.mean(truth == pred))
    err = np.abs(truth.astype(np.int64) - pred.astype(np.int64))
    if float(x).is_integer():
        # integer credits summed exactly, one rounding at the end
        x = int(x)
        return int(np.sum(x - np.minimum(err, x))) / (x * truth.size)
    return float(np.mean((x - np.minimum(err, x)) / x))


@dataclass
class EvalReport:
    acc: dict[int, float]
    confusion: np.ndarray
    n: int
    granularity: str = "year"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "granularity": self.granularity,
            "n": self.n,
            "acc": {f"ACC_{k}": v for k, v in sorted(self.acc.items())},
            "confusion": self.confusion.tolist(),
            **self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        acc = {int(k.split("_")[1]): v for k, v in d["acc"].items()}
        extra = {k: v for k, v in d.items() if k not in ("granularity", "n", "acc", "confusion")}
        return cls(acc, np.asarray(d["confusion"], dtype=np.int64), d["n"], d["granularity"], extra)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_confusion_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["truth\\pred"] + list(range(self.confusion.shape[1])))
            for i, row in enumerate(self.confusion):
                w.writerow([i] + row.tolist())


def report_from_predictions(truth, pred, gran: Granularity) -> EvalReport:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.size == 0:
        raise ValueError("cannot evaluate an empty dataset")
    conf = np.zeros((gran.n_classes, gran.n_classes), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    acc = {x: acc_x(truth, pred, x) for x in gran.tolerances}
    return EvalReport(acc, conf, int(truth.size), gran.name)


def predict_tracks(model, dataset, indices=None, n_excerpts: int = 8, seed: int = 0, batch_size: int = 128):
    """Track-level logits: mean of the logits of ``n_excerpts`` random excerpts per track."""
    indices = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    rng = np.random.default_rng(seed)
    logits = np.zeros((len(indices), model.cfg.encoder.n_classes))
    for _ in range(n_excerpts):
        for lo in range(0, len(indices), batch_size):
            chunk = indices[lo:lo + batch_size]
            x = dataset.excerpts(chunk, rng)
            bio = dataset.bio_matrix(chunk) if model.cfg.uses_mmc else None
            logits[lo:lo + len(chunk)] += model.predict_logits(x, bio)
    return logits / n_excerpts


def evaluate(model, dataset, gran: Granularity | None = None, indices=None, n_excerpts: int = 8,
             seed: int = 0) -> EvalReport:
    """Argmax of excerpt-averaged logits per track, scored with ACC_x and a confusion matrix."""
    gran = gran or dataset.granularity
    if model.cfg.encoder.n_classes != gran.n_classes:
        raise ValueError(f"model has {model.cfg.encoder.n_classes} classes but granularity "
                         f"{gran.name!r} has {gran.n_classes}")
    indices = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    if indices.size == 0:
        raise ValueError("cannot evaluate an empty dataset")
    logits = predict_tracks(model, dataset, indices, n_excerpts, seed)
    truth = dataset.labels(gran)[indices]
    return report_from_predictions(truth, logits.argmax(axis=1), gran)


def class_distribution(years: Iterable[int]) -> dict[int, int]:
    """Track count per release year, sorted by year."""
    return dict(sorted(Counter(int(y) for y in years).items()))


def write_distribution_csv(hist: dict[int, int], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["year", "count"])
        for year, count in hist.items():
            w.writerow([year, count])


def mean_reports(reports: list[EvalReport]) -> dict[int, float]:
    keys = reports[0].acc.keys()
    return {k: float(np.mean([r.acc[k] for r in reports])) for k in keys}
