import json

import numpy as np
import pytest

from advsource.attacks import AttackRecord
from advsource.model_zoo import Ensemble, ImageTensor, linear_handle, predict_class

# criterion number -> (title, passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {k:2d}. {title}: {detail}")


def linear_ensemble(n_models=3, shape=(1, 4, 4), num_classes=4, seed=0, spread=0.3):
    """Affine models sharing a common weight matrix plus per-model jitter."""
    rng = np.random.default_rng(seed)
    d = int(np.prod(shape))
    W = rng.normal(size=(num_classes, d))
    members = []
    for k in range(n_models):
        Wk = W + spread * rng.normal(size=W.shape)
        members.append(linear_handle(f"lin{k}", Wk, np.zeros(num_classes), shape))
    return Ensemble(members)


def eligible_image(ensemble, seed=0, image_id="img", max_tries=1000):
    """A random 8-bit image every member classifies the same way."""
    rng = np.random.default_rng(seed)
    shape = ensemble[0].input_shape
    for _ in range(max_tries):
        px = rng.integers(0, 256, size=shape) / 255.0
        preds = {predict_class(m, px) for m in ensemble}
        if len(preds) == 1:
            return ImageTensor(px, image_id, preds.pop())
    raise RuntimeError("no eligible image found")


def random_records(rng, n_images, n_models, kinds=("PGD",), p_success=0.5):
    """Full record sets (one per image, source, target, kind) with random outcomes."""
    out = []
    for i in range(n_images):
        for kind in kinds:
            for s in range(n_models):
                for t in range(n_models):
                    ok = bool(rng.random() < p_success)
                    hit = ok and bool(rng.random() < 0.5)
                    l2 = float(rng.uniform(0.01, 5.0)) if ok else None
                    linf = float(rng.uniform(1 / 255, 38 / 255)) if ok else None
                    out.append(AttackRecord(f"img{i:04d}", kind, s, t, ok, hit, l2, linf,
                                            int(rng.integers(1, 51)) if ok else None, 1, 0))
    return out


@pytest.fixture
def lin_ens():
    return linear_ensemble()


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def make_mini_campaign(root, n_images=8, seed=0, iterations=8):
    """Three linear torch models on 3x6x6 inputs, eligible random images and a plan."""
    import torch

    from advsource.model_zoo import build_linear, load_ensemble, save_image, write_manifest

    root.mkdir(parents=True, exist_ok=True)
    shape, m = (3, 6, 6), 5
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(m, int(np.prod(shape))))
    cfg = {"input_shape": list(shape), "num_classes": m, "models": {}}
    for k in range(3):
        net = build_linear(shape, m)
        with torch.no_grad():
            net[1].weight.copy_(torch.from_numpy(base + 0.8 * rng.normal(size=base.shape)))
            net[1].bias.zero_()
        torch.save(net.state_dict(), root / f"lin{k}.pt")
        cfg["models"][f"lin{k}"] = {"constructor": "linear", "weights": f"lin{k}.pt"}
    (root / "models.json").write_text(json.dumps(cfg))
    ens = load_ensemble(root / "models.json")
    (root / "images").mkdir(exist_ok=True)
    rows = []
    while len(rows) < n_images:
        px = rng.integers(0, 256, size=shape) / 255.0
        preds = {predict_class(h, px) for h in ens}
        if len(preds) == 1:
            image_id = f"im{len(rows):03d}"
            save_image(root / "images" / f"{image_id}.png", px)
            rows.append({"image_id": image_id, "path": f"images/{image_id}.png", "true_class": preds.pop()})
    write_manifest(root / "manifest.jsonl", rows)
    plan = {"models": "models.json", "manifest": "manifest.jsonl", "seed": seed, "store": "store",
            "attacks": [{"attack_kind": "PGD", "iterations": iterations},
                        {"attack_kind": "CW", "iterations": iterations, "cw_penalty_weight": 10.0},
                        {"attack_kind": "MIFGSM", "iterations": iterations}],
            "noise": [{"kind": "UNIFORM_SIGN", "iterations": iterations}, {"kind": "GAUSSIAN"},
                      {"kind": "CONTRAST"}]}
    (root / "plan.json").write_text(json.dumps(plan))
    return root / "plan.json"


def tree_bytes(root):
    """Relative path -> bytes for every file below root."""
    from pathlib import Path

    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
