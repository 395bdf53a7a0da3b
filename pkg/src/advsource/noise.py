"""Non-adversarial perturbations used to find fragile source images.

All arithmetic runs in 1/255 pixel units so an epsilon of 38 lines up
exactly with the attacks' 38/255 budget. Records reuse the AttackRecord
schema with ``source_model = -1`` and untargeted success on every member.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .attacks import AttackRecord, ProbeObserver, ProbeTracker, check_eligible, quantize
from .model_zoo import Ensemble, ImageTensor
from .rng import keyed_rng

UNIFORM_SIGN = "UNIFORM_SIGN"
GAUSSIAN = "GAUSSIAN"
CONTRAST = "CONTRAST"
NOISE_KINDS = (UNIFORM_SIGN, GAUSSIAN, CONTRAST)

_DEFAULT_RESTARTS = {UNIFORM_SIGN: 5, GAUSSIAN: 11, CONTRAST: 1}


class CoverageError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    kind: str = UNIFORM_SIGN
    epsilon_255: int = 38
    iterations: int = 50
    restarts: int | None = None
    sigma_255: float = 10.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if not 0 <= self.epsilon_255 <= 255:
            raise ValueError("epsilon_255 must lie in [0, 255]")
        if self.sigma_255 <= 0:
            raise ValueError("sigma_255 must be positive")
        if self.iterations < 1 or (self.restarts is not None and self.restarts < 1):
            raise ValueError("iterations and restarts must be >= 1")

    @property
    def tries(self) -> int:
        return self.restarts if self.restarts is not None else _DEFAULT_RESTARTS[self.kind]

    @property
    def epsilon(self) -> float:
        return self.epsilon_255 / 255.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown noise config fields: {sorted(unknown)}")
        return cls(**d)


def _project_units(v: np.ndarray, x_units: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.minimum(np.maximum(v, x_units - eps), x_units + eps), 0.0, 255.0)


def draw_sign_noise(cfg: NoiseConfig, image_id: str, attempt: int, shape) -> np.ndarray:
    """All per-iteration sign fields of one attempt, shape (iterations, *shape)."""
    rng = keyed_rng(cfg.rng_seed, image_id, UNIFORM_SIGN, attempt)
    return np.sign(rng.uniform(-1.0, 1.0, size=(cfg.iterations, *shape)))


def draw_gaussian_noise(cfg: NoiseConfig, image_id: str, attempt: int, shape) -> np.ndarray:
    """Pre-clip Gaussian field in 1/255 units."""
    rng = keyed_rng(cfg.rng_seed, image_id, GAUSSIAN, attempt)
    return rng.normal(0.0, cfg.sigma_255, size=shape)


def uniform_sign_noise(ensemble: Ensemble, x: ImageTensor, cfg: NoiseConfig,
                       observer: ProbeObserver | None = None) -> list[AttackRecord]:
    if cfg.kind != UNIFORM_SIGN:
        raise ValueError(f"config is for {cfg.kind}")
    check_eligible(ensemble, x)
    tracker = ProbeTracker(ensemble, x, UNIFORM_SIGN, -1, observer)
    x_units = x.pixels * 255.0
    for attempt in range(cfg.tries):
        tracker.attempt = attempt
        signs = draw_sign_noise(cfg, x.image_id, attempt, x.shape)
        v = x_units.copy()
        flipped = False
        for n in range(cfg.iterations):
            v = _project_units(v + signs[n], x_units, cfg.epsilon_255)
            hits = tracker.probe(quantize(v / 255.0, x.pixels, cfg.epsilon), n + 1)
            flipped = flipped or any(hits)
        if flipped:
            break
    return tracker.records()


def gaussian_noise(ensemble: Ensemble, x: ImageTensor, cfg: NoiseConfig,
                   observer: ProbeObserver | None = None) -> list[AttackRecord]:
    if cfg.kind != GAUSSIAN:
        raise ValueError(f"config is for {cfg.kind}")
    check_eligible(ensemble, x)
    tracker = ProbeTracker(ensemble, x, GAUSSIAN, -1, observer)
    x_units = x.pixels * 255.0
    for attempt in range(cfg.tries):
        tracker.attempt = attempt
        p = draw_gaussian_noise(cfg, x.image_id, attempt, x.shape)
        v = _project_units(x_units + p, x_units, cfg.epsilon_255)
        if any(tracker.probe(quantize(v / 255.0, x.pixels, cfg.epsilon), 1)):
            break
    return tracker.records()


def contrast_sweep(ensemble: Ensemble, x: ImageTensor, cfg: NoiseConfig,
                   observer: ProbeObserver | None = None) -> list[AttackRecord]:
    """Uniform brightness shifts b/255 for b in [-eps, eps] without 0.

    Per member the successful shift with smallest |b| is kept (smaller L2
    on a +/- tie, then the negative shift). ``iteration_found`` holds b.
    """
    if cfg.kind != CONTRAST:
        raise ValueError(f"config is for {cfg.kind}")
    check_eligible(ensemble, x)
    tracker = ProbeTracker(ensemble, x, CONTRAST, -1, observer,
                           rank=lambda l2, b: (abs(b), l2, b))
    for mag in range(1, cfg.epsilon_255 + 1):
        for b in (-mag, mag):
            shifted = np.clip(x.pixels + b / 255.0, 0.0, 1.0)
            tracker.probe(quantize(shifted, x.pixels, cfg.epsilon), b)
    return tracker.records()


_NOISE_RUNNERS = {UNIFORM_SIGN: uniform_sign_noise, GAUSSIAN: gaussian_noise, CONTRAST: contrast_sweep}


def run_noise(ensemble: Ensemble, x: ImageTensor, cfg: NoiseConfig,
              observer: ProbeObserver | None = None) -> list[AttackRecord]:
    return _NOISE_RUNNERS[cfg.kind](ensemble, x, cfg, observer)


def fragile_split(noise_records: Iterable[AttackRecord], images: Sequence) -> tuple[list[str], list[str]]:
    """Partition image ids into (fragile, hard), keeping input order.

    Fragile means at least one successful noise record on any member.
    """
    ids = [x.image_id if isinstance(x, ImageTensor) else str(x) for x in images]
    seen: set[str] = set()
    fragile: set[str] = set()
    for r in noise_records:
        seen.add(r.image_id)
        if r.success:
            fragile.add(r.image_id)
    missing = [i for i in ids if i not in seen]
    if missing:
        raise CoverageError(f"{len(missing)} images have no noise records, e.g. {missing[:3]}")
    return [i for i in ids if i in fragile], [i for i in ids if i not in fragile]
