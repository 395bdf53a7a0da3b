"""Classifier abstraction, model registry, dataset manifests and the
all-models-correct eligibility filter.

Attack code only ever talks to :class:`ClassifierHandle`, which exposes plain
numpy callables. Torch modules are wrapped by :func:`torch_handle`; any other
backend can be plugged in by constructing a handle directly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)


class InputShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ImageTensor:
    """An image in [0, 1] with shape (C, H, W) plus identity metadata."""

    pixels: np.ndarray
    image_id: str
    true_class: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3:
            raise InputShapeError(f"{self.image_id}: expected (C,H,W) pixels, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError(f"{self.image_id}: pixel values outside [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.pixels.shape


@dataclass
class ClassifierHandle:
    """Differentiable classifier seen through numpy callables.

    ``logits_fn(pixels) -> (M,)``; ``grad_fn(pixels, target)`` returns the
    gradient of the targeted cross-entropy w.r.t. the pixels;
    ``vjp_fn(pixels, weights)`` returns the gradient of ``weights @ logits``.
    ``reentrant`` tells callers whether concurrent gradient calls are safe.
    """

    model_id: str
    num_classes: int
    input_shape: tuple[int, ...]
    logits_fn: Callable[[np.ndarray], np.ndarray]
    grad_fn: Callable[[np.ndarray, int], np.ndarray]
    vjp_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    reentrant: bool = False

    def check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if tuple(x.shape) != tuple(self.input_shape):
            raise InputShapeError(
                f"model {self.model_id} expects input shape {tuple(self.input_shape)}, got {tuple(x.shape)}"
            )
        return x


@dataclass
class Ensemble:
    members: list[ClassifierHandle] = field(default_factory=list)

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("an ensemble needs at least two members")
        first = self.members[0]
        for m in self.members[1:]:
            if m.num_classes != first.num_classes or tuple(m.input_shape) != tuple(first.input_shape):
                raise ValueError(f"ensemble member {m.model_id} disagrees on classes or input shape")
        ids = [m.model_id for m in self.members]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate model_id in ensemble")

    def __len__(self) -> int:
        return len(self.members)

    def __getitem__(self, i: int) -> ClassifierHandle:
        return self.members[i]

    def __iter__(self):
        return iter(self.members)

    @property
    def model_ids(self) -> list[str]:
        return [m.model_id for m in self.members]

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes


def _pixels(x) -> np.ndarray:
    return x.pixels if isinstance(x, ImageTensor) else np.asarray(x, dtype=np.float64)


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    z = np.exp(logits - logits.max())
    return z / z.sum()


def predict_logits(model: ClassifierHandle, x) -> np.ndarray:
    return np.asarray(model.logits_fn(model.check_input(_pixels(x))), dtype=np.float64)


def predict_class(model: ClassifierHandle, x) -> int:
    # np.argmax returns the first maximal index, i.e. lowest-index tie-break
    return int(np.argmax(predict_logits(model, x)))


def predict_probs(model: ClassifierHandle, x) -> np.ndarray:
    return softmax(predict_logits(model, x))


def loss_gradient(model: ClassifierHandle, x, target: int) -> np.ndarray:
    if not 0 <= target < model.num_classes:
        raise ValueError(f"target class {target} outside [0, {model.num_classes})")
    px = model.check_input(_pixels(x))
    return np.asarray(model.grad_fn(px, int(target)), dtype=np.float64).reshape(px.shape)


def logit_vjp(model: ClassifierHandle, x, weights: np.ndarray) -> np.ndarray:
    """Gradient of ``weights @ logits`` with respect to the pixels."""
    px = model.check_input(_pixels(x))
    if model.vjp_fn is None:
        raise NotImplementedError(f"model {model.model_id} does not expose logit gradients")
    return np.asarray(model.vjp_fn(px, np.asarray(weights, dtype=np.float64)), dtype=np.float64).reshape(px.shape)


def filter_eligible(ensemble: Ensemble, images: Sequence[ImageTensor]) -> list[ImageTensor]:
    """Keep the images every ensemble member classifies correctly, in input order."""
    if len(images) == 0:
        raise ValueError("no images to filter")
    kept = [x for x in images if all(predict_class(m, x) == x.true_class for m in ensemble)]
    logger.info("eligible images: %d of %d", len(kept), len(images))
    return kept


# ---------------------------------------------------------------------------
# handles


class Normalize(nn.Module):
    """Per-channel (x - mean) / std living inside the handle."""

    def __init__(self, mean: Sequence[float], std: Sequence[float]):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float64).view(-1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float64).view(-1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


def torch_handle(model_id: str, module: nn.Module, input_shape: Sequence[int], num_classes: int,
                 mean: Sequence[float] | None = None, std: Sequence[float] | None = None) -> ClassifierHandle:
    """Wrap a torch module (single image in, logits out) as a float64 handle in eval mode."""
    net = module
    if mean is not None or std is not None:
        c = input_shape[0]
        net = nn.Sequential(Normalize(mean or [0.0] * c, std or [1.0] * c), module)
    net = net.double().eval()
    for p in net.parameters():
        p.requires_grad_(False)

    def logits_fn(px):
        with torch.no_grad():
            return net(torch.from_numpy(px)[None])[0].numpy()

    def vjp_fn(px, weights):
        t = torch.from_numpy(px.copy())[None].requires_grad_(True)
        out = net(t)[0]
        (g,) = torch.autograd.grad(out @ torch.from_numpy(weights), t)
        return g[0].numpy()

    def grad_fn(px, target):
        t = torch.from_numpy(px.copy())[None].requires_grad_(True)
        loss = F.cross_entropy(net(t), torch.tensor([target]))
        (g,) = torch.autograd.grad(loss, t)
        return g[0].numpy()

    return ClassifierHandle(model_id, int(num_classes), tuple(input_shape), logits_fn, grad_fn, vjp_fn,
                            reentrant=False)


def linear_handle(model_id: str, weight: np.ndarray, bias: np.ndarray, input_shape: Sequence[int]) -> ClassifierHandle:
    """Affine classifier ``W @ x.ravel() + b`` with closed-form gradients (no autograd)."""
    W = np.asarray(weight, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    shape = tuple(input_shape)

    def logits_fn(px):
        return W @ px.ravel() + b

    def vjp_fn(px, weights):
        return (weights @ W).reshape(shape)

    def grad_fn(px, target):
        p = softmax(logits_fn(px))
        p[target] -= 1.0
        return (p @ W).reshape(shape)

    return ClassifierHandle(model_id, W.shape[0], shape, logits_fn, grad_fn, vjp_fn, reentrant=True)


# ---------------------------------------------------------------------------
# registry of named constructors

MODEL_CONSTRUCTORS: dict[str, Callable[..., nn.Module]] = {}


def register(name: str):
    def deco(fn):
        MODEL_CONSTRUCTORS[name] = fn
        return fn
    return deco


@register("mlp")
def build_mlp(input_shape, num_classes, hidden=(128,)):
    layers: list[nn.Module] = [nn.Flatten()]
    d = int(np.prod(input_shape))
    for h in hidden:
        layers += [nn.Linear(d, h), nn.ReLU()]
        d = h
    layers.append(nn.Linear(d, num_classes))
    return nn.Sequential(*layers)


@register("cnn")
def build_cnn(input_shape, num_classes, channels=(16, 32), hidden=64):
    c, h, w = input_shape
    layers: list[nn.Module] = []
    for ch in channels:
        layers += [nn.Conv2d(c, ch, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
        c, h, w = ch, h // 2, w // 2
    layers += [nn.Flatten(), nn.Linear(c * h * w, hidden), nn.ReLU(), nn.Linear(hidden, num_classes)]
    return nn.Sequential(*layers)


@register("linear")
def build_linear(input_shape, num_classes):
    return nn.Sequential(nn.Flatten(), nn.Linear(int(np.prod(input_shape)), num_classes))


def load_model_config(path) -> dict:
    path = Path(path)
    cfg = json.loads(path.read_text())
    if not isinstance(cfg.get("models"), dict) or not cfg["models"]:
        raise ValueError(f"{path}: expected a non-empty 'models' mapping")
    return cfg


def load_ensemble(path) -> Ensemble:
    """Build an ensemble from a registry config.

    Config layout::

        {"input_shape": [3, 32, 32], "num_classes": 10,
         "models": {"mlp_a": {"constructor": "mlp", "weights": "mlp_a.pt",
                              "params": {...}, "mean": [...], "std": [...]}, ...}}

    Weight paths are relative to the config file. Member order is the mapping order.
    """
    path = Path(path)
    cfg = load_model_config(path)
    shape = tuple(cfg["input_shape"])
    m = int(cfg["num_classes"])
    members = []
    for model_id, spec in cfg["models"].items():
        ctor = MODEL_CONSTRUCTORS.get(spec["constructor"])
        if ctor is None:
            raise KeyError(f"unknown constructor {spec['constructor']!r} for model {model_id}")
        module = ctor(shape, m, **spec.get("params", {}))
        state = torch.load(path.parent / spec["weights"], map_location="cpu", weights_only=True)
        module.load_state_dict(state)
        members.append(torch_handle(model_id, module, shape, m, spec.get("mean"), spec.get("std")))
    return Ensemble(members)


# ---------------------------------------------------------------------------
# dataset manifest


def read_manifest(path) -> list[dict]:
    """Newline-delimited JSON records with image_id, path and true_class."""
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            missing = {"image_id", "path", "true_class"} - rec.keys()
            if missing:
                raise ValueError(f"{path}:{n}: missing fields {sorted(missing)}")
            rows.append(rec)
    return rows


def write_manifest(path, rows: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps({"image_id": r["image_id"], "path": r["path"],
                                 "true_class": int(r["true_class"])}) + "\n")


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def save_image(path, pixels: np.ndarray) -> None:
    from PIL import Image

    k = np.round(np.asarray(pixels) * 255.0).astype(np.uint8)
    Image.fromarray(k[0] if k.shape[0] == 1 else k.transpose(1, 2, 0)).save(path)


def load_images(manifest_path) -> list[ImageTensor]:
    base = Path(manifest_path).parent
    return [ImageTensor(load_image(base / r["path"]), str(r["image_id"]), int(r["true_class"]))
            for r in read_manifest(manifest_path)]
