import math

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from advsource.attacks import AttackRecord
from advsource.model_zoo import ClassifierHandle, Ensemble, ImageTensor, linear_handle
from advsource.noise import (
    CONTRAST,
    GAUSSIAN,
    UNIFORM_SIGN,
    CoverageError,
    NoiseConfig,
    draw_gaussian_noise,
    fragile_split,
    run_noise,
)

from conftest import eligible_image, linear_ensemble


def const_ensemble(shape, m=3):
    logits = np.arange(m, 0, -1, dtype=np.float64)

    def h(name):
        return ClassifierHandle(name, m, shape, lambda px: logits.copy(), lambda px, c: np.zeros(shape))

    return Ensemble([h("c0"), h("c1")])


def grid_image(shape, level=128):
    return ImageTensor(np.full(shape, level / 255.0), "g", 0)


def test_single_uniform_step_is_one_level():
    shape = (3, 8, 8)
    probes = []
    run_noise(const_ensemble(shape), grid_image(shape), NoiseConfig(UNIFORM_SIGN, iterations=1, restarts=1),
              observer=probes.append)
    (p,) = probes
    k = np.round(p.pixels * 255) - 128
    assert set(np.unique(k)) <= {-1.0, 1.0}


def test_uniform_step_clamped_at_range():
    shape = (1, 8, 8)
    probes = []
    x = ImageTensor(np.zeros(shape), "black", 0)
    run_noise(const_ensemble(shape), x, NoiseConfig(UNIFORM_SIGN, iterations=1, restarts=1), observer=probes.append)
    assert set(np.unique(np.round(probes[0].pixels * 255))) <= {0.0, 1.0}


@pytest.mark.parametrize("kind", [UNIFORM_SIGN, GAUSSIAN, CONTRAST])
def test_zero_epsilon_all_fail(kind):
    ens = linear_ensemble(3, seed=2)
    x = eligible_image(ens, seed=1)
    recs = run_noise(ens, x, NoiseConfig(kind, epsilon_255=0, iterations=3))
    assert len(recs) == 3 and not any(r.success for r in recs)
    assert all(r.source_model == -1 and r.attack_kind == kind for r in recs)


def test_clipped_walk_distribution():
    # 100489 pixels at mid-grey; displacement after n steps vs an independent simulation
    shape, n, eps = (1, 317, 317), 30, 5
    probes = []
    run_noise(const_ensemble(shape), grid_image(shape),
              NoiseConfig(UNIFORM_SIGN, epsilon_255=eps, iterations=n, restarts=1, rng_seed=3),
              observer=lambda p: probes.append(p) if p.iteration == n else None)
    got = (np.round(probes[0].pixels * 255) - 128).astype(int).ravel()

    rng = np.random.default_rng(2024)
    walk = np.zeros(got.size, dtype=int)
    for _ in range(n):
        walk = np.clip(walk + rng.choice([-1, 1], size=walk.size), -eps, eps)
    levels = np.arange(-eps, eps + 1)
    table = np.array([[np.sum(got == v) for v in levels], [np.sum(walk == v) for v in levels]])
    table = table[:, table.sum(axis=0) > 0]
    assert chi2_contingency(table)[1] > 1e-3
    assert np.abs(got).max() <= eps


def test_gaussian_variance():
    cfg = NoiseConfig(GAUSSIAN, sigma_255=10.0, rng_seed=9)
    p = draw_gaussian_noise(cfg, "img", 0, (1, 317, 317))
    assert abs(p.var() / 100.0 - 1.0) < 0.03
    assert abs(p.mean()) < 0.1


def test_gaussian_tiny_sigma_is_identity():
    shape = (1, 8, 8)
    probes = []
    recs = run_noise(const_ensemble(shape), grid_image(shape), NoiseConfig(GAUSSIAN, sigma_255=1e-9),
                     observer=probes.append)
    assert len(probes) == 11
    assert all(np.array_equal(p.pixels, np.full(shape, 128 / 255)) for p in probes)
    assert not any(r.success for r in recs)


def test_gaussian_probes_in_ball():
    shape = (3, 16, 16)
    probes = []
    x = ImageTensor(np.random.default_rng(0).integers(0, 256, size=shape) / 255.0, "r", 0)
    run_noise(const_ensemble(shape), x, NoiseConfig(GAUSSIAN, sigma_255=40.0), observer=probes.append)
    for p in probes:
        k = np.round(p.pixels * 255)
        assert np.array_equal(k, p.pixels * 255)
        assert np.abs(k - np.round(x.pixels * 255)).max() <= 38


def test_uniform_restarts_only_without_flip():
    shape = (1, 4, 4)
    probes = []
    run_noise(const_ensemble(shape), grid_image(shape), NoiseConfig(UNIFORM_SIGN, iterations=2),
              observer=probes.append)
    assert sorted({p.attempt for p in probes}) == [0, 1, 2, 3, 4]


def test_contrast_constant_model_all_fail():
    shape = (1, 4, 4)
    probes = []
    recs = run_noise(const_ensemble(shape), grid_image(shape), NoiseConfig(CONTRAST), observer=probes.append)
    assert len(probes) == 76 and sorted(p.iteration for p in probes) == [b for b in range(-38, 39) if b]
    assert not any(r.success for r in recs)


def test_contrast_black_image_negative_shifts_absorbed():
    shape = (1, 4, 4)
    probes = []
    x = ImageTensor(np.zeros(shape), "black", 0)
    run_noise(const_ensemble(shape), x, NoiseConfig(CONTRAST), observer=probes.append)
    for p in probes:
        if p.iteration < 0:
            assert np.array_equal(p.pixels, x.pixels)


@pytest.mark.parametrize("slope,offset", [(1.0, 0.3), (2.0, 0.05), (-1.5, 0.2)])
def test_contrast_analytic_threshold(slope, offset):
    shape = (1, 4, 4)
    d = 16
    x = grid_image(shape)
    s0 = x.pixels.sum()
    # logit0 = slope * (sum(x) - s0) + offset, logit1 = 0: class 0 at x
    W = np.vstack([np.full(d, slope), np.zeros(d)])
    b = np.array([offset - slope * s0, 0.0])
    h = linear_handle("lin", W, b, shape)
    ens = Ensemble([h, linear_handle("lin2", W, b, shape)])
    rec = run_noise(ens, x, NoiseConfig(CONTRAST))[0]
    # flip needs slope * d * b / 255 + offset < 0 (a tie keeps class 0)
    t = -offset * 255 / (slope * d)
    b_star = math.ceil(t) - 1 if slope > 0 else math.floor(t) + 1
    assert rec.success and rec.iteration_found == b_star
    assert rec.l2 == pytest.approx(abs(b_star) / 255 * math.sqrt(d), rel=1e-12)
    assert rec.linf == pytest.approx(abs(b_star) / 255, rel=1e-12)


def test_contrast_prefers_negative_on_tie():
    shape = (1, 2, 2)
    x = grid_image(shape)
    # prediction flips once the brightness shift reaches 3 levels in either direction

    def logits(px):
        shift = round((px.mean() - 128 / 255) * 255)
        return np.array([1.0, 0.0]) if abs(shift) < 3 else np.array([0.0, 1.0])

    h = ClassifierHandle("sym", 2, shape, logits, lambda px, c: np.zeros(shape))
    ens = Ensemble([h, ClassifierHandle("sym2", 2, shape, logits, lambda px, c: np.zeros(shape))])
    rec = run_noise(ens, x, NoiseConfig(CONTRAST))[0]
    assert rec.iteration_found == -3


def rec(image_id, kind, j, ok):
    return AttackRecord(image_id, kind, -1, j, ok, False, 0.1 if ok else None, 0.01 if ok else None,
                        1 if ok else None, -1, 0)


def test_fragile_split():
    ids = ["a", "b", "c", "d"]
    recs = [rec(i, k, j, False) for i in ids for k in (UNIFORM_SIGN, GAUSSIAN, CONTRAST) for j in range(3)]
    recs[recs.index(rec("c", GAUSSIAN, 1, False))] = rec("c", GAUSSIAN, 1, True)
    fragile, hard = fragile_split(recs, ids)
    assert fragile == ["c"] and hard == ["a", "b", "d"]
    rng = np.random.default_rng(0)
    shuffled = [recs[k] for k in rng.permutation(len(recs))]
    assert fragile_split(shuffled, ids) == (fragile, hard)
    with pytest.raises(CoverageError):
        fragile_split(recs, ids + ["e"])


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig("BLUR")
    with pytest.raises(ValueError):
        NoiseConfig(GAUSSIAN, sigma_255=0)
    with pytest.raises(ValueError):
        NoiseConfig(UNIFORM_SIGN, epsilon_255=256)
    cfg = NoiseConfig(GAUSSIAN, rng_seed=7)
    assert cfg.tries == 11 and NoiseConfig().tries == 5 and NoiseConfig(CONTRAST).tries == 1
    assert NoiseConfig.from_dict(cfg.to_dict()) == cfg


def test_noise_deterministic():
    ens = linear_ensemble(3, seed=2, spread=1.0)
    x = eligible_image(ens, seed=4)
    for kind in (UNIFORM_SIGN, GAUSSIAN, CONTRAST):
        cfg = NoiseConfig(kind, rng_seed=11)
        assert run_noise(ens, x, cfg) == run_noise(ens, x, cfg)
