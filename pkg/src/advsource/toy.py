"""Desk-scale toy setup: a synthetic 10-class image
set and three small trained classifiers written out as weight files, a
model registry config and an 8-bit PNG manifest.

Images mix the prototype of their class with the prototype of a distractor
class (mixing weight drawn per image) plus pixel noise. Part of the source
pool is additionally washed out towards mid-gray, a contrast regime the
classifiers never see in training; these images get soft predictions and
make up most of the fragile set.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .model_zoo import MODEL_CONSTRUCTORS, filter_eligible, ImageTensor, load_ensemble, save_image, write_manifest

logger = logging.getLogger(__name__)

SHAPE = (3, 32, 32)
NUM_CLASSES = 10

TOY_MODELS = {
    "mlp_wide": {"constructor": "mlp", "params": {"hidden": [256]}, "seed": 11, "epochs": 30},
    "cnn_small": {"constructor": "cnn", "params": {"channels": [8, 16], "hidden": 64}, "seed": 12, "epochs": 20},
    "mlp_deep": {"constructor": "mlp", "params": {"hidden": [128, 64]}, "seed": 13, "epochs": 30},
}


@dataclass
class ToyData:
    x: np.ndarray  # (n, C, H, W) float64 on the k/255 grid
    y: np.ndarray
    mix: np.ndarray  # per-image distractor weight


def prototypes(seed: int, num_classes: int = NUM_CLASSES, shape=SHAPE, low=0.25, high=0.75) -> np.ndarray:
    rng = np.random.default_rng(seed)
    c, h, w = shape
    coarse = rng.integers(0, 2, size=(num_classes, c, 4, 4)).astype(np.float64)
    t = torch.from_numpy(coarse)
    smooth = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False).numpy()
    return low + (high - low) * smooth


def make_data(n: int, seed: int, protos: np.ndarray, max_mix=0.5, noise=0.08, faint_fraction=0.0,
              faint_range=(0.05, 0.3)) -> ToyData:
    rng = np.random.default_rng(seed)
    m = protos.shape[0]
    y = rng.integers(0, m, size=n)
    other = (y + rng.integers(1, m, size=n)) % m
    mix = rng.uniform(0.0, max_mix, size=n)
    x = (1 - mix)[:, None, None, None] * protos[y] + mix[:, None, None, None] * protos[other]
    # faint images: contrast around mid-gray scaled down, a regime absent from training data
    scale = np.where(rng.random(n) < faint_fraction, rng.uniform(*faint_range, size=n), 1.0)
    x = 0.5 + scale[:, None, None, None] * (x - 0.5)
    x = x + rng.normal(0.0, noise, size=x.shape)
    x = np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0
    return ToyData(x, y, mix)


def train_model(name: str, spec: dict, data: ToyData, shape=SHAPE, num_classes=NUM_CLASSES):
    torch.manual_seed(spec["seed"])
    module = MODEL_CONSTRUCTORS[spec["constructor"]](shape, num_classes, **spec.get("params", {}))
    module = module.double()
    opt = torch.optim.Adam(module.parameters(), lr=1e-3)
    xt = torch.from_numpy(data.x)
    yt = torch.from_numpy(data.y).long()
    gen = torch.Generator().manual_seed(spec["seed"])
    for epoch in range(spec["epochs"]):
        perm = torch.randperm(len(xt), generator=gen)
        for i in range(0, len(xt), 64):
            idx = perm[i:i + 64]
            opt.zero_grad()
            loss = F.cross_entropy(module(xt[idx]), yt[idx])
            loss.backward()
            opt.step()
    module.eval()
    with torch.no_grad():
        acc = (module(xt).argmax(1) == yt).double().mean().item()
    logger.info("trained %s: train accuracy %.3f", name, acc)
    return module


def build_toy(out_dir, seed: int = 0, n_train: int = 2000, n_pool: int = 700, n_images: int | None = 300,
              faint_fraction: float = 0.5) -> dict:
    """Write models.json, weight files, PNGs and manifests under ``out_dir``.

    ``manifest.jsonl`` lists the whole pool; ``eligible.jsonl`` the first
    ``n_images`` images every model classifies correctly.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    protos = prototypes(seed)
    train = make_data(n_train, seed + 1, protos)
    pool = make_data(n_pool, seed + 2, protos, faint_fraction=faint_fraction, faint_range=(0.05, 0.3))

    cfg = {"input_shape": list(SHAPE), "num_classes": NUM_CLASSES, "models": {}}
    for name, spec in TOY_MODELS.items():
        module = train_model(name, spec, train)
        torch.save(module.state_dict(), out / f"{name}.pt")
        cfg["models"][name] = {"constructor": spec["constructor"], "weights": f"{name}.pt",
                               "params": spec.get("params", {})}
    (out / "models.json").write_text(json.dumps(cfg, indent=2) + "\n")

    rows = []
    for i, (px, c) in enumerate(zip(pool.x, pool.y)):
        rel = f"images/img_{i:05d}.png"
        save_image(out / rel, px)
        rows.append({"image_id": f"img_{i:05d}", "path": rel, "true_class": int(c)})
    write_manifest(out / "manifest.jsonl", rows)

    ensemble = load_ensemble(out / "models.json")
    images = [ImageTensor(px, r["image_id"], r["true_class"]) for px, r in zip(pool.x, rows)]
    keep = {x.image_id for x in filter_eligible(ensemble, images)}
    eligible = [r for r in rows if r["image_id"] in keep]
    if n_images is not None:
        if len(eligible) < n_images:
            raise RuntimeError(f"only {len(eligible)} eligible toy images, wanted {n_images}")
        eligible = eligible[:n_images]
    write_manifest(out / "eligible.jsonl", eligible)
    return {"models": out / "models.json", "manifest": out / "manifest.jsonl",
            "eligible": out / "eligible.jsonl", "n_eligible": len(keep)}


def write_desk_plan(out_dir, seed: int = 0, manifest: str = "eligible.jsonl", store: str = "store",
                    cw_penalty_weight: float = 10.0) -> Path:
    """Plan running the three attacks at default settings plus all noise kinds.

    The CW penalty weight is raised from 1 to 10: at weight 1 the L2 term
    dominates the margin on these small models and white-box CW rarely lands.
    """
    plan = {
        "models": "models.json", "manifest": manifest, "seed": seed, "store": store,
        "attacks": [{"attack_kind": "PGD"}, {"attack_kind": "CW", "cw_penalty_weight": cw_penalty_weight},
                    {"attack_kind": "MIFGSM"}],
        "noise": [{"kind": "UNIFORM_SIGN"}, {"kind": "GAUSSIAN"}, {"kind": "CONTRAST"}],
    }
    path = Path(out_dir) / "plan.json"
    path.write_text(json.dumps(plan, indent=2) + "\n")
    return path
