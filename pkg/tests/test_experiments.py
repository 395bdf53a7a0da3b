import csv
import json

import numpy as np
import pytest

from advsource.attacks import AttackRecord, PreconditionError
from advsource.experiments import (
    CampaignPlan,
    correlation_study,
    histogram_T,
    run_campaign,
    sampling_study,
    split_report,
    transfer_counts,
    write_sampling_csv,
)
from advsource.metrics import transfer_matrix
from advsource.store import RecordStore
from advsource.suitability import SuitabilityScore

from conftest import make_mini_campaign, random_records, tree_bytes


@pytest.fixture(scope="module")
def mini(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini")
    plan_path = make_mini_campaign(root)
    plan = CampaignPlan.load(plan_path)
    store = run_campaign(plan)
    return plan_path, plan, store


def test_campaign_counts(mini):
    _, plan, store = mini
    attack = [r for r in store.scan(["PGD", "CW", "MIFGSM"])]
    noise = [r for r in store.scan(["UNIFORM_SIGN", "GAUSSIAN", "CONTRAST"])]
    assert len({(r.image_id, r.source_model, r.attack_kind) for r in attack}) == 8 * 3 * 3
    assert len(attack) == 8 * 3 * 3 * 3
    assert len(noise) == 8 * 3 * 3
    assert all(r.plan_hash == plan.plan_hash() for r in attack + noise)
    assert all(store.is_complete(n) for n in store.shard_names())
    assert store.meta["seed"] == plan.seed


def test_rerun_is_noop(mini):
    _, plan, store = mini
    before = tree_bytes(store.root)
    run_campaign(plan)
    assert tree_bytes(store.root) == before


def test_resume_after_crash_and_determinism(mini, tmp_path):
    plan_path, plan, store = mini
    other = run_campaign(plan, tmp_path / "fresh")
    assert tree_bytes(other.root) == tree_bytes(store.root)
    # lose half a shard plus a torn line, clear its completion flag, resume
    path = other.shard_path("CW__1")
    lines = path.read_bytes().splitlines(keepends=True)
    path.write_bytes(b"".join(lines[:10]) + lines[10][:17])
    other.meta["shards"].pop("CW__1")
    other._save_meta()
    run_campaign(plan, tmp_path / "fresh")
    assert tree_bytes(tmp_path / "fresh") == tree_bytes(store.root)


def test_parallel_matches_serial(mini, tmp_path):
    _, plan, store = mini
    par = run_campaign(plan, tmp_path / "par", workers=2)
    assert tree_bytes(par.root) == tree_bytes(store.root)


def test_plan_hash_covers_inputs(mini, tmp_path):
    plan_path, plan, _ = mini
    base = plan.plan_hash()
    assert CampaignPlan.load(plan_path).plan_hash() == base
    assert CampaignPlan.load(plan_path, seed=plan.seed + 1).plan_hash() != base
    raw = json.loads(plan_path.read_text())
    variants = []
    for field, value in [("epsilon", 30 / 255), ("iterations", 9), ("step_alpha", 0.01), ("kappa", 5.0),
                         ("mu", 0.5), ("cw_penalty_weight", 2.0), ("max_retries", 4)]:
        d = json.loads(json.dumps(raw))
        d["attacks"][1][field] = value
        variants.append(d)
    for field, value in [("epsilon_255", 30), ("iterations", 9), ("restarts", 2), ("sigma_255", 5.0)]:
        d = json.loads(json.dumps(raw))
        d["noise"][1][field] = value
        variants.append(d)
    hashes = {CampaignPlan.from_dict(d, plan_path.parent).plan_hash() for d in variants}
    assert len(hashes) == len(variants) and base not in hashes
    # store location does not matter
    d = dict(raw, store="elsewhere")
    assert CampaignPlan.from_dict(d, plan_path.parent).plan_hash() == base


def test_plan_hash_covers_file_contents(tmp_path):
    plan_path = make_mini_campaign(tmp_path / "c", n_images=3)
    h0 = CampaignPlan.load(plan_path).plan_hash()
    img = tmp_path / "c" / "images" / "im001.png"
    from advsource.model_zoo import load_image, save_image

    px = load_image(img)
    px[0, 0, 0] = 1.0 - px[0, 0, 0]
    save_image(img, px)
    h1 = CampaignPlan.load(plan_path).plan_hash()
    assert h1 != h0
    w = tmp_path / "c" / "lin2.pt"
    import torch

    state = torch.load(w, weights_only=True)
    state["1.bias"][0] += 1e-6
    torch.save(state, w)
    assert CampaignPlan.load(plan_path).plan_hash() not in (h0, h1)


def test_ineligible_manifest_rejected(tmp_path):
    plan_path = make_mini_campaign(tmp_path / "c", n_images=3)
    rows = [json.loads(x) for x in (tmp_path / "c" / "manifest.jsonl").read_text().splitlines()]
    rows[1]["true_class"] = (rows[1]["true_class"] + 1) % 5
    (tmp_path / "c" / "manifest.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    with pytest.raises(PreconditionError):
        run_campaign(CampaignPlan.load(plan_path))


def test_plan_validation(tmp_path):
    with pytest.raises(ValueError):
        CampaignPlan.from_dict({"models": "m", "manifest": "x", "bogus": 1})
    with pytest.raises(ValueError):
        CampaignPlan.from_dict({"models": "m", "manifest": "x", "attacks": [{"attack_kind": "PGD"}] * 2})
    with pytest.raises(ValueError):
        CampaignPlan.from_dict({"models": "m", "manifest": "x", "seed": -1})


def R(image, s, t, ok, l2=1.0, kind="PGD"):
    return AttackRecord(image, kind, s, t, ok, False, l2 if ok else None, l2 / 10 if ok else None,
                        1 if ok else None, 0, 0)


def test_histogram_examples():
    ids = [f"i{k}" for k in range(5)]
    zero = [R(i, s, t, s == t) for i in ids for s in range(3) for t in range(3)]
    counts, edges = histogram_T(zero, ids, 3)
    assert counts[0] == 5 and counts.sum() == 5 and edges[0] == 0 and edges[-1] == 7
    rng = np.random.default_rng(0)
    recs = random_records(rng, 40, 3, kinds=("PGD", "CW"))
    ids = sorted({r.image_id for r in recs})
    for attack in (None, "PGD", "CW"):
        counts, _ = histogram_T(recs, ids, 3, attack)
        assert counts.sum() == 40
    counts, _ = histogram_T(recs, ids, 3, bins=3)
    assert len(counts) == 3 and counts.sum() == 40


def test_correlation_planted_linearity():
    ids = [f"i{k}" for k in range(12)]
    recs, scores = [], []
    rng = np.random.default_rng(1)
    for k, i in enumerate(ids):
        T = k % 7
        pairs = [(s, t) for s in range(3) for t in range(3) if s != t][:T]
        for s in range(3):
            for t in range(3):
                ok = (s, t) in pairs or (s == t)
                # D_2 = 5 - 0.5 T exactly: every success carries the same norm
                recs.append(R(i, s, t, ok, l2=5.0 - 0.5 * T))
        for m in ("a", "b", "c"):
            scores.append(SuitabilityScore(i, m, *rng.random(4)))
    study = correlation_study(recs, scores, ids, ["a", "b", "c"])
    assert study["perturbation"]["PGD"]["T_vs_D2"] == pytest.approx(-1.0)
    assert study["perturbation"]["ALL"]["T_vs_D2"] == pytest.approx(-1.0)
    assert set(study["table"]) == {("PGD", e) for e in ("q_ratio", "one_minus_max", "mse", "wd")}


def test_sampling_degenerate_cases():
    rng = np.random.default_rng(2)
    recs = random_records(rng, 30, 3, kinds=("PGD", "MIFGSM"))
    ids = sorted({r.image_id for r in recs})
    rep = sampling_study(recs, ids, 3, n=30, repetitions=5)
    for key, (lo, avg, hi) in rep.stats.items():
        off = ~np.eye(3, dtype=bool)
        np.testing.assert_allclose(lo[off], hi[off])
        np.testing.assert_allclose(avg[off], lo[off])
        if key[1] == "transfer":
            np.testing.assert_allclose(avg[off], transfer_matrix(
                [r for r in recs if r.attack_kind == key[0]], 3, image_ids=ids)[off])
    rep1 = sampling_study(recs, ids, 3, n=10, repetitions=1)
    for lo, avg, hi in rep1.stats.values():
        np.testing.assert_array_equal(lo, hi)
    rep = sampling_study(recs, ids, 3, n=10, repetitions=50, seed=4)
    for lo, avg, hi in rep.stats.values():
        ok = ~np.isnan(avg)
        assert np.all(lo[ok] <= avg[ok] + 1e-15) and np.all(avg[ok] <= hi[ok] + 1e-15)
    with pytest.raises(ValueError):
        sampling_study(recs, ids, 3, n=31, repetitions=5)


def test_sampling_keyed_by_repetition():
    rng = np.random.default_rng(3)
    recs = random_records(rng, 30, 3)
    ids = sorted({r.image_id for r in recs})
    a = sampling_study(recs, ids, 3, n=10, repetitions=20, seed=1)
    b = sampling_study(recs, ids, 3, n=10, repetitions=40, seed=1)
    np.testing.assert_array_equal(a.transfer_samples["PGD"], b.transfer_samples["PGD"][:20])


def test_split_report():
    rng = np.random.default_rng(5)
    recs = random_records(rng, 20, 3, kinds=("PGD", "CW"))
    ids = sorted({r.image_id for r in recs})
    fragile, hard = ids[:7], ids[7:]
    rep = split_report(recs, fragile, hard, 3, ids)
    for kind in ("PGD", "CW"):
        m = rep[kind]
        avg = (len(fragile) * m["S_f"] + len(hard) * m["S_h"]) / len(ids)
        np.testing.assert_allclose(m["S"], avg, atol=1e-15)
        # integer counting identity
        assert np.array_equal(np.round(m["S"] * 20), np.round(m["S_f"] * 7) + np.round(m["S_h"] * 13))
    all_f = split_report(recs, ids, [], 3, ids)
    assert np.all(np.isnan(all_f["PGD"]["S_h"]))
    with pytest.raises(ValueError):
        split_report(recs, ids[:5], ids[4:], 3, ids)
    with pytest.raises(ValueError):
        split_report(recs, ids[:5], ids[6:], 3, ids)


def test_sampling_csv_layout(tmp_path):
    rng = np.random.default_rng(6)
    recs = random_records(rng, 20, 3, kinds=("PGD", "CW"))
    ids = sorted({r.image_id for r in recs})
    reps = {"S": sampling_study(recs, ids, 3, n=10, repetitions=30),
            "S_h": sampling_study(recs, ids[5:], 3, n=10, repetitions=30)}
    write_sampling_csv(tmp_path / "s.csv", reps)
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["metric", "attack", "source", "target", "stat", "S", "S_h"]
    assert rows[1][-2:] == ["20", "15"]
    body = rows[2:]
    assert len(body) == 3 * 2 * 6 * 3
    assert [r[4] for r in body[:3]] == ["Low", "Avg", "High"]
    assert body[0][:2] == ["transfer", "PGD"]


def test_transfer_counts_mean():
    recs = [R("a", 0, 1, True, kind="PGD"), R("a", 1, 0, True, kind="PGD"), R("a", 0, 1, True, kind="CW")]
    assert transfer_counts(recs, ["a"])["a"] == 1.5
    assert transfer_counts(recs, ["a"], "PGD")["a"] == 2


def test_store_is_frozen_after_analysis(mini):
    _, _, store = mini
    before = tree_bytes(store.root)
    recs = store.records()
    ids = store.image_ids
    histogram_T(recs, ids, 3)
    split_report(recs, ids[:3], ids[3:], 3, ids)
    sampling_study(recs, ids, 3, n=4, repetitions=10)
    assert tree_bytes(RecordStore.open(store.root).root) == before
