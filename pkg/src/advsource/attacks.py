"""Targeted PGD, CW and MI-FGSM with per-iteration transfer probing.

Each run starts from an eligible source image, attacks one source model
towards a randomly drawn target class and, after every iteration, evaluates
an 8-bit quantized copy of the iterate on every ensemble member. For every
target model the successful probe with the smallest L2 norm is kept.
If the source model is never driven to the target class, a new target
class is drawn and the attack restarts (``max_retries`` attempts in total).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable, NamedTuple

import numpy as np

from .model_zoo import (
    ClassifierHandle,
    Ensemble,
    ImageTensor,
    InputShapeError,
    logit_vjp,
    loss_gradient,
    predict_class,
    predict_logits,
)
from .rng import keyed_rng

logger = logging.getLogger(__name__)

PGD = "PGD"
CW = "CW"
MIFGSM = "MIFGSM"
ATTACK_KINDS = (PGD, CW, MIFGSM)

DEFAULT_EPSILON = 38 / 255


class PreconditionError(ValueError):
    pass


class AttackBackendError(RuntimeError):
    def __init__(self, image_id, iteration, cause):
        super().__init__(f"gradient failure on image {image_id} at iteration {iteration}: {cause}")
        self.image_id = image_id
        self.iteration = iteration


@dataclass(frozen=True)
class AttackConfig:
    attack_kind: str = PGD
    epsilon: float = DEFAULT_EPSILON
    iterations: int = 50
    step_alpha: float | None = None
    kappa: float = 20.0
    mu: float = 1.0
    cw_penalty_weight: float = 1.0
    max_retries: int = 5
    rng_seed: int = 0

    def __post_init__(self):
        if self.attack_kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack_kind {self.attack_kind!r}; expected one of {ATTACK_KINDS}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if abs(self.epsilon * 255 - round(self.epsilon * 255)) > 1e-9:
            raise ValueError(f"epsilon {self.epsilon} is not a multiple of 1/255")
        if self.iterations < 1 or self.max_retries < 1:
            raise ValueError("iterations and max_retries must be >= 1")

    @property
    def alpha(self) -> float:
        if self.step_alpha is not None:
            return float(self.step_alpha)
        return 2.5 * self.epsilon / self.iterations

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown attack config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class AttackRecord:
    """Outcome for one (image, source model, target model, attack).

    ``source_model == target_model`` marks the white-box record; noise
    procedures use ``source_model = -1``. Unsuccessful records carry ``None``
    norms and iteration. For CONTRAST, ``iteration_found`` holds the signed
    brightness shift in 1/255 units.
    """

    image_id: str
    attack_kind: str
    source_model: int
    target_model: int
    success: bool
    targeted_hit: bool
    l2: float | None
    linf: float | None
    iteration_found: int | None
    target_class: int
    attempt_index: int
    plan_hash: str = ""

    @property
    def key(self) -> tuple:
        return (self.image_id, self.source_model, self.target_model, self.attack_kind)


class Probe(NamedTuple):
    pixels: np.ndarray
    attempt: int
    iteration: int
    target_class: int
    l2: float
    linf: float
    hits: tuple  # per ensemble member: success flag as judged for that member
    image_id: str = ""


ProbeObserver = Callable[[Probe], None]


def project(x_hat: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp into the L-inf ball of radius epsilon around x, then into [0, 1]."""
    x_hat = np.minimum(np.maximum(x_hat, x - epsilon), x + epsilon)
    return np.clip(x_hat, 0.0, 1.0)


def quantize(x_hat: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Round to the k/255 grid while keeping both the ball and [0, 1] constraints."""
    lo = np.maximum(np.ceil((x - epsilon) * 255.0 - 1e-9), 0.0)
    hi = np.minimum(np.floor((x + epsilon) * 255.0 + 1e-9), 255.0)
    k = np.clip(np.round(x_hat * 255.0), lo, hi)
    return k / 255.0


def cw_margin_loss(logits: np.ndarray, target: int, kappa: float) -> float:
    """max(max_{k != c} g_k - g_c, -kappa)."""
    logits = np.asarray(logits, dtype=np.float64)
    other = np.delete(logits, target).max()
    return max(float(other - logits[target]), -float(kappa))


def _cw_margin_weights(logits: np.ndarray, target: int, kappa: float) -> np.ndarray:
    """Logit weights whose vjp is the gradient of the margin loss (zero on the floor)."""
    w = np.zeros_like(logits)
    masked = logits.copy()
    masked[target] = -np.inf
    k = int(np.argmax(masked))
    if logits[k] - logits[target] > -kappa:
        w[k] = 1.0
        w[target] = -1.0
    return w


class ProbeTracker:
    """Keeps the L2-minimal successful probe per ensemble member."""

    def __init__(self, ensemble: Ensemble, x: ImageTensor, kind: str, source: int,
                 observer: ProbeObserver | None = None, rank=None):
        self.ensemble = ensemble
        # ordering of successful probes, smaller wins; default is the L2 norm
        self.rank = rank or (lambda l2, iteration: l2)
        self.x = x
        self.kind = kind
        self.source = source
        self.observer = observer
        self.best: dict[int, tuple] = {}
        self.attempt = 0
        self.target_class = -1
        # 8-bit sources get exact norms from integer level differences
        levels = x.pixels * 255.0
        self._levels = levels if np.array_equal(levels, np.round(levels)) else None

    def probe(self, pixels: np.ndarray, iteration: int) -> tuple:
        """Evaluate one quantized probe; returns per-member success flags.

        The source member (if any) succeeds when it predicts the target
        class; every other member succeeds when it leaves the true class.
        """
        if self._levels is not None:
            k = np.round(pixels * 255.0) - self._levels
            l2 = float(np.sqrt(np.sum(k * k))) / 255.0
            linf = float(np.max(np.abs(k))) / 255.0 if k.size else 0.0
        else:
            diff = pixels - self.x.pixels
            l2 = float(np.sqrt(np.sum(diff * diff)))
            linf = float(np.max(np.abs(diff))) if diff.size else 0.0
        if l2 == 0.0:
            hits = (False,) * len(self.ensemble)
        else:
            preds = [predict_class(m, pixels) for m in self.ensemble]
            hits = tuple(
                (p == self.target_class) if j == self.source else (p != self.x.true_class)
                for j, p in enumerate(preds)
            )
            for j, ok in enumerate(hits):
                if ok and (j not in self.best or self.rank(l2, iteration) < self.best[j][0]):
                    self.best[j] = (self.rank(l2, iteration), l2, linf, iteration, self.target_class,
                                    self.attempt, preds[j] == self.target_class)
        if self.observer is not None:
            self.observer(Probe(pixels, self.attempt, iteration, self.target_class, l2, linf, hits,
                                self.x.image_id))
        return hits

    def records(self) -> list[AttackRecord]:
        out = []
        for j in range(len(self.ensemble)):
            if j in self.best:
                _, l2, linf, it, c, att, thit = self.best[j]
                out.append(AttackRecord(self.x.image_id, self.kind, self.source, j, True, bool(thit),
                                        l2, linf, it, c, att))
            else:
                out.append(AttackRecord(self.x.image_id, self.kind, self.source, j, False, False,
                                        None, None, None, self.target_class, self.attempt))
        return out


def _source_index(ensemble: Ensemble, model_src) -> int:
    if isinstance(model_src, (int, np.integer)):
        if not 0 <= model_src < len(ensemble):
            raise IndexError(f"source model index {model_src} out of range")
        return int(model_src)
    for i, m in enumerate(ensemble.members):
        if m is model_src:
            return i
    raise ValueError(f"model {model_src.model_id} is not an ensemble member")


def check_eligible(ensemble: Ensemble, x: ImageTensor) -> None:
    for m in ensemble:
        if predict_class(m, x) != x.true_class:
            raise PreconditionError(f"image {x.image_id} is misclassified by {m.model_id}")


def _pgd_stepper(model: ClassifierHandle, x0, cfg, target):
    alpha, eps = cfg.alpha, cfg.epsilon

    def step(x_hat):
        g = loss_gradient(model, x_hat, target)
        return project(x_hat - alpha * np.sign(g), x0, eps)

    return step


def _mifgsm_stepper(model: ClassifierHandle, x0, cfg, target):
    alpha, eps, mu = cfg.alpha, cfg.epsilon, cfg.mu
    tau = np.zeros_like(x0)

    def step(x_hat):
        nonlocal tau
        g = loss_gradient(model, x_hat, target)
        norm1 = np.abs(g).sum()
        if norm1 > 0:
            tau = mu * tau + g / norm1
        else:
            logger.debug("zero gradient on %s; momentum gets no update", model.model_id)
            tau = mu * tau
        return project(x_hat - alpha * np.sign(tau), x0, eps)

    return step


def _cw_stepper(model: ClassifierHandle, x0, cfg, target):
    alpha, eps, kappa, weight = cfg.alpha, cfg.epsilon, cfg.kappa, cfg.cw_penalty_weight

    def step(x_hat):
        w = _cw_margin_weights(predict_logits(model, x_hat), target, kappa)
        grad = weight * logit_vjp(model, x_hat, w) if w.any() else np.zeros_like(x_hat)
        delta = x_hat - x0
        n = np.sqrt(np.sum(delta * delta))
        if n > 0:
            grad = grad + delta / n
        return project(x_hat - alpha * grad, x0, eps)

    return step


_STEPPERS = {PGD: _pgd_stepper, CW: _cw_stepper, MIFGSM: _mifgsm_stepper}


def _run(kind, model_src, ensemble, x, cfg, observer):
    if cfg.attack_kind != kind:
        raise ValueError(f"config is for {cfg.attack_kind}, not {kind}")
    src = _source_index(ensemble, model_src)
    check_eligible(ensemble, x)
    model = ensemble[src]
    rng = keyed_rng(cfg.rng_seed, x.image_id, src, kind)
    tracker = ProbeTracker(ensemble, x, kind, src, observer)
    x0 = x.pixels
    tried = {x.true_class}
    for attempt in range(cfg.max_retries):
        candidates = [c for c in range(ensemble.num_classes) if c not in tried]
        if not candidates:
            break
        target = candidates[int(rng.integers(len(candidates)))]
        tried.add(target)
        tracker.attempt, tracker.target_class = attempt, target
        step = _STEPPERS[kind](model, x0, cfg, target)
        x_hat = x0.copy()
        reached = False
        for n in range(1, cfg.iterations + 1):
            try:
                x_hat = step(x_hat)
            except InputShapeError:
                raise
            except Exception as exc:
                raise AttackBackendError(x.image_id, n, exc) from exc
            hits = tracker.probe(quantize(x_hat, x0, cfg.epsilon), n)
            reached = reached or hits[src]
        if reached:
            break
    return tracker.records()


def pgd_run(model_src, ensemble: Ensemble, x: ImageTensor, cfg: AttackConfig,
            observer: ProbeObserver | None = None) -> list[AttackRecord]:
    return _run(PGD, model_src, ensemble, x, cfg, observer)


def cw_run(model_src, ensemble: Ensemble, x: ImageTensor, cfg: AttackConfig,
           observer: ProbeObserver | None = None) -> list[AttackRecord]:
    return _run(CW, model_src, ensemble, x, cfg, observer)


def mifgsm_run(model_src, ensemble: Ensemble, x: ImageTensor, cfg: AttackConfig,
               observer: ProbeObserver | None = None) -> list[AttackRecord]:
    return _run(MIFGSM, model_src, ensemble, x, cfg, observer)


_RUNNERS = {PGD: pgd_run, CW: cw_run, MIFGSM: mifgsm_run}


def run_attack(ensemble: Ensemble, source: int, x: ImageTensor, cfg: AttackConfig,
               observer: ProbeObserver | None = None) -> list[AttackRecord]:
    """Dispatch on ``cfg.attack_kind``; output is a pure function of the inputs and seed."""
    runner = _RUNNERS.get(cfg.attack_kind)
    if runner is None:
        raise ValueError(f"unknown attack_kind {cfg.attack_kind!r}")
    return runner(source, ensemble, x, cfg, observer)


def sign_step_trajectory(model: ClassifierHandle, x0: np.ndarray, cfg: AttackConfig, target: int,
                         kind: str = PGD) -> list[np.ndarray]:
    """Continuous iterates of one attempt; used to compare update rules."""
    step = _STEPPERS[kind](model, np.asarray(x0, dtype=np.float64), cfg, target)
    x_hat = np.asarray(x0, dtype=np.float64).copy()
    out = []
    for _ in range(cfg.iterations):
        x_hat = step(x_hat)
        out.append(x_hat)
    return out
