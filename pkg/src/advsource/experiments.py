"""Campaign orchestration and the analyses run over a finished store."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import metrics
from .attacks import ATTACK_KINDS, AttackConfig, AttackRecord, check_eligible, run_attack
from .model_zoo import load_ensemble, load_images, load_model_config, read_manifest
from .noise import NOISE_KINDS, NoiseConfig, fragile_split, run_noise
from .rng import keyed_rng
from .store import RecordStore, shard_name
from .suitability import ESTIMATES, SuitabilityScore, aggregate, pearson

logger = logging.getLogger(__name__)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class CampaignPlan:
    """What to run. Relative paths resolve against ``base_dir``.

    Plan file (JSON)::

        {"models": "models.json", "manifest": "eligible.jsonl", "seed": 0,
         "attacks": [{"attack_kind": "PGD"}, ...], "noise": [{"kind": "GAUSSIAN"}, ...],
         "store": "store", "shards": 1}
    """

    models: Path
    manifest: Path
    attacks: list[AttackConfig] = field(default_factory=list)
    noise: list[NoiseConfig] = field(default_factory=list)
    seed: int = 0
    store: Path | None = None
    shards: int = 1

    @classmethod
    def from_dict(cls, d: dict, base_dir=".", seed: int | None = None) -> "CampaignPlan":
        known = {"models", "manifest", "attacks", "noise", "seed", "store", "shards"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown plan fields: {sorted(unknown)}")
        base = Path(base_dir)
        s = int(d.get("seed", 0) if seed is None else seed)
        if not 0 <= s < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        attacks = [AttackConfig.from_dict({**a, "rng_seed": s}) for a in d.get("attacks", [])]
        noise = [NoiseConfig.from_dict({**n, "rng_seed": s}) for n in d.get("noise", [])]
        if len({a.attack_kind for a in attacks}) != len(attacks) or len({n.kind for n in noise}) != len(noise):
            raise ValueError("at most one config per attack / noise kind")
        return cls(models=base / d["models"], manifest=base / d["manifest"], attacks=attacks, noise=noise,
                   seed=s, store=(base / d["store"]) if d.get("store") else None, shards=int(d.get("shards", 1)))

    @classmethod
    def load(cls, path, seed: int | None = None) -> "CampaignPlan":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent, seed)

    def fingerprint(self) -> dict:
        """Everything that affects outputs: configs, seed, and content digests of inputs."""
        model_cfg = load_model_config(self.models)
        weights = {mid: _sha256(self.models.parent / spec["weights"]) for mid, spec in model_cfg["models"].items()}
        rows = read_manifest(self.manifest)
        images = [[r["image_id"], int(r["true_class"]), _sha256(self.manifest.parent / r["path"])] for r in rows]
        return {"models": model_cfg, "weights": weights, "images": images, "seed": self.seed,
                "attacks": [a.to_dict() for a in self.attacks], "noise": [n.to_dict() for n in self.noise]}

    def plan_hash(self) -> str:
        blob = json.dumps(self.fingerprint(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _run_shard(models_path, manifest_path, cfg, source, store_root, plan_hash, images=None, observer=None):
    """Worker body: one (kind, source model) shard, images in manifest order."""
    import torch

    torch.set_num_threads(1)
    ensemble = load_ensemble(models_path)
    images = images if images is not None else load_images(manifest_path)
    store = RecordStore.open(store_root)
    kind = cfg.attack_kind if isinstance(cfg, AttackConfig) else cfg.kind
    name = shard_name(kind, source)
    if store.is_complete(name):
        return name, 0
    store.recover_shard(name)
    done = store.done_runs(name)
    new = 0
    for x in images:
        if (x.image_id, source, kind) in done:
            continue
        if isinstance(cfg, AttackConfig):
            recs = run_attack(ensemble, source, x, cfg, observer)
        else:
            recs = run_noise(ensemble, x, cfg, observer)
        store.append_run([_stamp(r, plan_hash) for r in recs])
        new += 1
    return name, new


def _stamp(r: AttackRecord, plan_hash: str) -> AttackRecord:
    return replace(r, plan_hash=plan_hash)


def run_campaign(plan: CampaignPlan, store_root=None, workers: int = 1,
                 parts: Sequence[str] = ("attacks", "noise"), observer=None) -> RecordStore:
    """Run every (image x source model x attack) and (image x noise kind).

    Resumable: runs already present in the store are skipped. Shards are
    (kind, source model) pairs and may run in separate processes. An
    ``observer`` sees every probe and forces in-process execution.
    """
    root = Path(store_root or plan.store or "store")
    ensemble = load_ensemble(plan.models)
    images = load_images(plan.manifest)
    for x in images:
        check_eligible(ensemble, x)
    phash = plan.plan_hash()
    store = RecordStore(root, phash, plan.seed, len(ensemble), ensemble.model_ids, [x.image_id for x in images])

    jobs = []
    if "attacks" in parts:
        jobs += [(cfg, i) for cfg in plan.attacks for i in range(len(ensemble))]
    if "noise" in parts:
        jobs += [(cfg, -1) for cfg in plan.noise]
    jobs = [(c, s) for c, s in jobs
            if not store.is_complete(shard_name(c.attack_kind if isinstance(c, AttackConfig) else c.kind, s))]

    if workers > 1 and len(jobs) > 1 and observer is None:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_run_shard, plan.models, plan.manifest, c, s, root, phash) for c, s in jobs]
            results = [f.result() for f in futs]
    else:
        results = [_run_shard(plan.models, plan.manifest, c, s, root, phash, images, observer) for c, s in jobs]
    store = RecordStore.open(root)
    for name, new in results:
        logger.info("shard %s: %d new runs", name, new)
        store.mark_complete(name)
    return store


# ---------------------------------------------------------------------------
# analyses


def _by_image(records: Iterable[AttackRecord]) -> dict[str, list[AttackRecord]]:
    out = defaultdict(list)
    for r in records:
        out[r.image_id].append(r)
    return out


def attack_records(records: Iterable[AttackRecord], kind: str | None = None) -> list[AttackRecord]:
    return [r for r in records if r.source_model >= 0 and (kind is None or r.attack_kind == kind)]


def attack_kinds_present(records: Iterable[AttackRecord]) -> list[str]:
    present = {r.attack_kind for r in records if r.source_model >= 0}
    return [k for k in ATTACK_KINDS if k in present]


def transfer_counts(records: Iterable[AttackRecord], image_ids: Sequence[str], kind: str | None = None) -> dict:
    """Per-image T for one attack, or the mean over attacks when kind is None."""
    recs = attack_records(records, kind)
    by = _by_image(recs)
    if kind is not None:
        return {i: metrics.transfer_count(by.get(i, [])) for i in image_ids}
    return {i: metrics.mean_transfer_count(by.get(i, [])) for i in image_ids}


def histogram_T(records: Iterable[AttackRecord], image_ids: Sequence[str], n_models: int,
                attack: str | None = None, bins=None):
    """Image counts per transfer-count bin over [0, N(N-1)]; unit bins by default."""
    t = np.array(list(transfer_counts(records, image_ids, attack).values()), dtype=np.float64)
    top = n_models * (n_models - 1)
    if bins is None:
        bins = np.arange(top + 2)
    counts, edges = np.histogram(t, bins=bins, range=(0, top + 1))
    return counts, edges


def correlation_study(records: Iterable[AttackRecord], scores: Sequence[SuitabilityScore],
                      image_ids: Sequence[str], model_ids: Sequence[str], skip_undefined: bool = False) -> dict:
    """Pearson correlations.

    ``perturbation``: per attack (and ``ALL`` = mean T over attacks against
    the minimum D_p across attacks), T vs D_2 and T vs D_inf over images.
    ``table``: per attack, estimate x {T, d2, dinf}. The T column pairs the
    ensemble-mean estimate with T per image; the d_p columns pair member j's
    estimate with d_p for target j over (image, j) pairs that have a d_p.
    With ``skip_undefined`` a cell with fewer than three pairs or zero
    variance is reported as None instead of raising.
    """
    records = attack_records(records)
    by = _by_image(records)
    kinds = attack_kinds_present(records)
    n = len(model_ids)
    per_model = {(s.image_id, s.model_id): s for s in scores}

    def safe(xs, ys):
        if not skip_undefined:
            return pearson(xs, ys)
        try:
            return pearson(xs, ys)
        except ValueError:  # includes UndefinedCorrelationError
            return None

    perturbation = {}
    mins = {}
    for kind in kinds:
        t, d2, dinf = [], [], []
        for i in image_ids:
            recs = [r for r in by.get(i, []) if r.attack_kind == kind]
            a, b = metrics.D_p(recs, 2), metrics.D_p(recs, "inf")
            mins.setdefault(i, []).append((a, b))
            if a is not None:
                t.append(metrics.transfer_count(recs))
                d2.append(a)
                dinf.append(b)
        perturbation[kind] = {"T_vs_D2": safe(t, d2), "T_vs_Dinf": safe(t, dinf)}
    tbar, d2, dinf = [], [], []
    for i in image_ids:
        vals = [v for v in mins.get(i, []) if v[0] is not None]
        if vals:
            tbar.append(metrics.mean_transfer_count(by.get(i, [])))
            d2.append(min(v[0] for v in vals))
            dinf.append(min(v[1] for v in vals))
    perturbation["ALL"] = {"T_vs_D2": safe(tbar, d2), "T_vs_Dinf": safe(tbar, dinf)}

    table = {}
    for kind in kinds:
        for est in ESTIMATES:
            agg = aggregate(scores, est)
            t = transfer_counts(records, image_ids, kind)
            ids = [i for i in image_ids if i in agg]
            row = {"T": safe([agg[i] for i in ids], [t[i] for i in ids])}
            for p, col in ((2, "d2"), ("inf", "dinf")):
                xs, ys = [], []
                for i in image_ids:
                    recs = [r for r in by.get(i, []) if r.attack_kind == kind]
                    for j in range(n):
                        d = metrics.d_p(recs, j, p)
                        s = per_model.get((i, model_ids[j]))
                        if d is not None and s is not None:
                            xs.append(getattr(s, est))
                            ys.append(d)
                row[col] = safe(xs, ys)
            table[(kind, est)] = row
    return {"perturbation": perturbation, "table": table}


@dataclass
class SamplingReport:
    """Low / average / high over repetitions, per attack and ordered pair (i, j), i != j.

    ``transfer_samples[kind]`` keeps the per-repetition proportions, shape (R, N, N).
    """

    n: int
    repetitions: int
    subset_size: int
    model_ids: list[str]
    stats: dict = field(default_factory=dict)  # (kind, metric) -> (low, avg, high) arrays (N, N)
    transfer_samples: dict = field(default_factory=dict)
    full: dict = field(default_factory=dict)  # (kind, metric) -> full-subset values (N, N)


def _dense(records, ids, n_models, kind):
    """success / l2 / linf arrays of shape (len(ids), N, N); absent norms are NaN."""
    pos = {i: k for k, i in enumerate(ids)}
    succ = np.zeros((len(ids), n_models, n_models), dtype=bool)
    l2 = np.full(succ.shape, np.nan)
    linf = np.full(succ.shape, np.nan)
    for r in records:
        if r.attack_kind != kind or r.source_model < 0 or r.image_id not in pos:
            continue
        if r.success:
            k = pos[r.image_id]
            succ[k, r.source_model, r.target_model] = True
            l2[k, r.source_model, r.target_model] = r.l2
            linf[k, r.source_model, r.target_model] = r.linf
    return succ, l2, linf


def _nanmean(a, axis=0):
    cnt = np.sum(~np.isnan(a), axis=axis)
    tot = np.nansum(a, axis=axis)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)


def _nanstat(a, fn):
    ok = ~np.all(np.isnan(a), axis=0)
    out = np.full(a.shape[1:], np.nan)
    if ok.any():
        out[ok] = fn(a[:, ok], axis=0)
    return out


def sampling_study(records: Iterable[AttackRecord], subset: Sequence[str], n_models: int, n: int = 1000,
                   repetitions: int = 10000, seed: int = 0, model_ids: Sequence[str] | None = None) -> SamplingReport:
    """Draw ``repetitions`` samples of ``n`` images without replacement and
    report per-pair transferability and mean norms over the samples."""
    ids = list(dict.fromkeys(subset))
    if len(ids) < n:
        raise ValueError(f"subset has {len(ids)} images, fewer than the sample size {n}")
    if n < 1 or repetitions < 1:
        raise ValueError("n and repetitions must be positive")
    records = attack_records(records)
    kinds = attack_kinds_present(records)
    draws = np.stack([keyed_rng(seed, "sampling", r).choice(len(ids), size=n, replace=False)
                      for r in range(repetitions)])
    report = SamplingReport(n, repetitions, len(ids), list(model_ids or [str(i) for i in range(n_models)]))
    off = ~np.eye(n_models, dtype=bool)
    for kind in kinds:
        succ, l2, linf = _dense(records, ids, n_models, kind)
        samples = succ[draws].mean(axis=1)  # (R, N, N)
        report.transfer_samples[kind] = samples
        report.full[(kind, "transfer")] = succ.mean(axis=0)
        for name, arr in (("l2", l2), ("linf", linf)):
            per_rep = np.stack([_nanmean(arr[d]) for d in draws])
            report.stats[(kind, name)] = (_nanstat(per_rep, np.min), _nanstat(per_rep, np.mean),
                                          _nanstat(per_rep, np.max))
            report.full[(kind, name)] = _nanmean(arr)
        report.stats[(kind, "transfer")] = (samples.min(axis=0), samples.mean(axis=0), samples.max(axis=0))
        for key in [(kind, m) for m in ("transfer", "l2", "linf")]:
            report.stats[key] = tuple(np.where(off, s, np.nan) for s in report.stats[key])
    return report


def split_report(records: Iterable[AttackRecord], fragile: Sequence[str], hard: Sequence[str],
                 n_models: int, image_ids: Sequence[str] | None = None) -> dict:
    """Untargeted transfer matrices over S, S_f and S_h per attack; an empty part is all-NaN."""
    fragile, hard = list(fragile), list(hard)
    if set(fragile) & set(hard):
        raise ValueError("fragile and hard sets overlap")
    everything = fragile + hard
    if image_ids is not None and set(image_ids) != set(everything):
        raise ValueError("fragile and hard sets do not partition the image set")
    records = attack_records(records)
    out = {}
    for kind in attack_kinds_present(records):
        recs = [r for r in records if r.attack_kind == kind]
        parts = {}
        for name, ids in (("S", everything), ("S_f", fragile), ("S_h", hard)):
            if ids:
                parts[name] = metrics.transfer_matrix(recs, n_models, "untargeted", ids)
            else:
                parts[name] = np.full((n_models, n_models), np.nan)
        out[kind] = parts
    return out


def fragile_split_from_store(store: RecordStore) -> tuple[list[str], list[str]]:
    return fragile_split([r for r in store.scan(NOISE_KINDS)], store.image_ids)


def mean_offdiag(matrix: np.ndarray) -> float:
    off = ~np.eye(matrix.shape[0], dtype=bool)
    return float(np.mean(matrix[off]))


# ---------------------------------------------------------------------------
# exports


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return f"{v:.4f}"


def write_sampling_csv(path, reports: Mapping[str, SamplingReport]) -> None:
    """Rows = metric x attack x pair x {Low, Avg, High}; one column per subset."""
    names = list(reports)
    first = reports[names[0]]
    n = len(first.model_ids)
    keys = sorted({k for r in reports.values() for k in r.stats},
                  key=lambda k: (("transfer", "l2", "linf").index(k[1]), ATTACK_KINDS.index(k[0])))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "attack", "source", "target", "stat", *names])
        w.writerow(["images_in_set", "", "", "", "", *(reports[s].subset_size for s in names)])
        for kind, metric in keys:
            for i in range(n):
                for j in range(n):
                    if i == j:
                        continue
                    for s_idx, stat in enumerate(("Low", "Avg", "High")):
                        vals = []
                        for s in names:
                            st = reports[s].stats.get((kind, metric))
                            vals.append(_fmt(float(st[s_idx][i, j])) if st is not None else "")
                        w.writerow([metric, kind, first.model_ids[i], first.model_ids[j], stat, *vals])


def write_histogram_csv(path, counts, edges) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "images"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{lo:g}", f"{hi:g}", int(c)])


def write_correlation_csv(path, study: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["section", "attack", "estimate", "against", "pearson"])
        for kind, row in study["perturbation"].items():
            for col, v in row.items():
                w.writerow(["perturbation", kind, "T", col.split("_vs_")[1], _fmt(v)])
        for (kind, est), row in study["table"].items():
            for col, v in row.items():
                w.writerow(["table", kind, est, col, _fmt(v)])


def write_split_csv(path, report: dict, model_ids: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["attack", "set", "source\\target", *model_ids])
        for kind, parts in report.items():
            for name, m in parts.items():
                for mid, row in zip(model_ids, m):
                    w.writerow([kind, name, mid, *(_fmt(float(v)) for v in row)])
