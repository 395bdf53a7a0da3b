"""Perturbation norms and per-image transferability statistics.

Norms are in [0, 1] pixel units. Absent minima are ``None`` (never 0 or inf).
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .attacks import AttackRecord
from .model_zoo import ImageTensor, InputShapeError


class DataIntegrityError(ValueError):
    pass


def _arr(x) -> np.ndarray:
    return x.pixels if isinstance(x, ImageTensor) else np.asarray(x, dtype=np.float64)


def _diff(x, x_hat) -> np.ndarray:
    a, b = _arr(x), _arr(x_hat)
    if a.shape != b.shape:
        raise InputShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a - b


def l2_norm(x, x_hat) -> float:
    d = _diff(x, x_hat).ravel()
    return float(np.sqrt(np.dot(d, d)))


def linf_norm(x, x_hat) -> float:
    d = _diff(x, x_hat)
    return float(np.abs(d).max()) if d.size else 0.0


def _norm_field(p) -> str:
    if p in (2, "2", "l2"):
        return "l2"
    if p in (np.inf, "inf", "linf", float("inf")):
        return "linf"
    raise ValueError(f"unsupported norm {p!r}; use 2 or inf")


def d_p(records: Iterable[AttackRecord], target_model: int, p=2) -> float | None:
    """Smallest p-norm over successful i -> target_model attack records with i != target."""
    f = _norm_field(p)
    vals = [getattr(r, f) for r in records
            if r.success and r.target_model == target_model and 0 <= r.source_model != target_model]
    return min(vals) if vals else None


def D_p(records: Iterable[AttackRecord], p=2) -> float | None:
    records = list(records)
    vals = [v for v in (d_p(records, j, p) for j in {r.target_model for r in records}) if v is not None]
    return min(vals) if vals else None


def _check_unique(records: Sequence[AttackRecord]) -> None:
    seen = set()
    for r in records:
        if r.key in seen:
            raise DataIntegrityError(f"duplicate record for {r.key}")
        seen.add(r.key)


def transfer_count(records: Iterable[AttackRecord]) -> int:
    """Number of ordered pairs (i, j), i != j, with a successful transfer (one image, one attack)."""
    records = list(records)
    _check_unique(records)
    return sum(1 for r in records
               if r.success and r.source_model >= 0 and r.source_model != r.target_model)


def mean_transfer_count(records: Iterable[AttackRecord]) -> float:
    """Transfer count averaged over the attack kinds present for one image."""
    by_kind = defaultdict(list)
    for r in records:
        by_kind[r.attack_kind].append(r)
    if not by_kind:
        return 0.0
    return float(np.mean([transfer_count(v) for v in by_kind.values()]))


def transfer_matrix(records: Iterable[AttackRecord], n_models: int, mode: str = "untargeted",
                    image_ids: Iterable[str] | None = None) -> np.ndarray:
    """Cell (i, j): fraction of images with a successful i -> j record.

    The diagonal holds the white-box success fraction. ``targeted`` mode
    additionally requires ``targeted_hit``. The denominator is ``image_ids``
    when given, otherwise the images present in ``records``.
    """
    if mode not in ("untargeted", "targeted"):
        raise ValueError(f"unknown mode {mode!r}")
    records = list(records)
    ids = set(image_ids) if image_ids is not None else {r.image_id for r in records}
    counts = np.zeros((n_models, n_models))
    hit = set()
    for r in records:
        if r.image_id not in ids or r.source_model < 0 or not r.success:
            continue
        if mode == "targeted" and not r.targeted_hit:
            continue
        k = (r.image_id, r.source_model, r.target_model)
        if k not in hit:
            hit.add(k)
            counts[r.source_model, r.target_model] += 1
    if not ids:
        return counts
    return counts / len(ids)


@dataclass
class TransferSummary:
    image_id: str
    transfer_count: dict[str, int] = field(default_factory=dict)
    min_l2: dict[str, list] = field(default_factory=dict)  # per attack: d_2 per target model
    min_linf: dict[str, list] = field(default_factory=dict)
    global_min_l2: dict[str, float | None] = field(default_factory=dict)
    global_min_linf: dict[str, float | None] = field(default_factory=dict)
    untargeted_matrix: dict[str, np.ndarray] = field(default_factory=dict)
    targeted_matrix: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def mean_transfer_count(self) -> float:
        return float(np.mean(list(self.transfer_count.values()))) if self.transfer_count else 0.0


def summarize_image(image_id: str, records: Iterable[AttackRecord], n_models: int) -> TransferSummary:
    """Per-attack T, d_p and D_p for one image (attack records only)."""
    by_kind = defaultdict(list)
    for r in records:
        if r.image_id == image_id and r.source_model >= 0:
            by_kind[r.attack_kind].append(r)
    s = TransferSummary(image_id)
    for kind, recs in sorted(by_kind.items()):
        s.transfer_count[kind] = transfer_count(recs)
        s.min_l2[kind] = [d_p(recs, j, 2) for j in range(n_models)]
        s.min_linf[kind] = [d_p(recs, j, "inf") for j in range(n_models)]
        s.global_min_l2[kind] = D_p(recs, 2)
        s.global_min_linf[kind] = D_p(recs, "inf")
        s.untargeted_matrix[kind] = transfer_matrix(recs, n_models, "untargeted", [image_id])
        s.targeted_matrix[kind] = transfer_matrix(recs, n_models, "targeted", [image_id])
    return s


def write_matrix_csv(path, matrix: np.ndarray, model_ids: Sequence[str]) -> None:
    """Row-major matrix with model_id labels; null cells stay empty."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source\\target", *model_ids])
        for mid, row in zip(model_ids, matrix):
            w.writerow([mid, *("" if v is None or np.isnan(v) else f"{v:.4f}" for v in row)])
