"""Prediction-error estimates of source images and the analyses built on them."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model_zoo import Ensemble, ImageTensor, predict_probs


class UndefinedCorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class SuitabilityScore:
    image_id: str
    model_id: str
    q_ratio: float
    one_minus_max: float
    mse: float
    wd: float


def q_ratio(probs) -> float:
    """Second-largest probability over the largest."""
    p = np.asarray(probs, dtype=np.float64)
    if p.size < 2:
        raise ValueError("q_ratio needs at least two classes")
    top2 = np.partition(p, -2)[-2:]
    return float(top2[0] / top2[1])


def one_minus_max(probs) -> float:
    return float(1.0 - np.max(probs))


def _one_hot(true_class: int, m: int) -> np.ndarray:
    y = np.zeros(m)
    y[true_class] = 1.0
    return y


def mse(probs, true_class: int, num_classes: int | None = None) -> float:
    p = np.asarray(probs, dtype=np.float64)
    m = num_classes or p.size
    return float(np.sum((_one_hot(true_class, p.size) - p) ** 2) / m)


def wasserstein(probs, true_class: int, num_classes: int | None = None) -> float:
    """W1 between the prediction and the one-hot label on unit-spaced class indices."""
    p = np.asarray(probs, dtype=np.float64)
    return float(np.abs(np.cumsum(p) - np.cumsum(_one_hot(true_class, p.size))).sum())


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-D sequences of equal length")
    if x.size < 3:
        raise ValueError("pearson needs at least 3 points")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(np.dot(xc, xc)), math.sqrt(np.dot(yc, yc))
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("zero variance; correlation undefined")
    return float(np.clip(np.dot(xc, yc) / (sx * sy), -1.0, 1.0))


def score_probs(image_id: str, model_id: str, probs, true_class: int) -> SuitabilityScore:
    return SuitabilityScore(image_id, model_id, q_ratio(probs), one_minus_max(probs),
                            mse(probs, true_class), wasserstein(probs, true_class))


def score_images(ensemble: Ensemble, images: Sequence[ImageTensor]) -> list[SuitabilityScore]:
    return [score_probs(x.image_id, m.model_id, predict_probs(m, x), x.true_class)
            for x in images for m in ensemble]


ESTIMATES = ("q_ratio", "one_minus_max", "mse", "wd")


def aggregate(scores: Sequence[SuitabilityScore], estimate: str = "q_ratio",
              model_id: str | None = None) -> dict[str, float]:
    """Per-image estimate: mean over ensemble members, or one member's value."""
    if estimate not in ESTIMATES:
        raise ValueError(f"unknown estimate {estimate!r}")
    acc: dict[str, list] = {}
    for s in scores:
        if model_id is None or s.model_id == model_id:
            acc.setdefault(s.image_id, []).append(getattr(s, estimate))
    return {k: float(np.mean(v)) for k, v in acc.items()}


def percentile_filter(scores: Mapping[str, float], lower_p: float, upper_p: float):
    """Split images by nearest-rank percentiles of their score.

    Returns ``(low, high, middle)`` id lists in input order: ``low`` holds the
    images at or below the lower_p cut, ``high`` those strictly above the
    upper_p cut and ``middle`` the rest. Ties at a cut stay in the lower bucket.
    """
    if not 0 <= lower_p < upper_p <= 100:
        raise ValueError("need 0 <= lower_p < upper_p <= 100")
    ids = list(scores)
    vals = np.array([scores[i] for i in ids], dtype=np.float64)
    order = np.sort(vals)
    n = len(ids)

    def cut(p):
        r = math.ceil(p / 100.0 * n - 1e-9)
        return None if r <= 0 else order[min(r, n) - 1]

    lo_cut, hi_cut = cut(lower_p), cut(upper_p)
    low = [i for i, v in zip(ids, vals) if lo_cut is not None and v <= lo_cut]
    high = [i for i, v in zip(ids, vals) if hi_cut is not None and v > hi_cut]
    taken = set(low) | set(high)
    return low, high, [i for i in ids if i not in taken]


def write_scores_csv(path, scores: Sequence[SuitabilityScore]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "model_id", "q", "one_minus_max", "mse", "wd"])
        for s in scores:
            w.writerow([s.image_id, s.model_id, repr(s.q_ratio), repr(s.one_minus_max), repr(s.mse), repr(s.wd)])


def read_scores_csv(path) -> list[SuitabilityScore]:
    with open(path, newline="") as fh:
        return [SuitabilityScore(r["image_id"], r["model_id"], float(r["q"]), float(r["one_minus_max"]),
                                 float(r["mse"]), float(r["wd"])) for r in csv.DictReader(fh)]
