"""Command-line entry point: ``advsource <command> ...``.

Exit codes: 0 ok, 1 data error, 2 usage error.
"""

from __future__ import annotations

import json
import logging
import sys
from functools import wraps
from pathlib import Path

import click
import numpy as np

from . import experiments as ex
from .attacks import ATTACK_KINDS
from .metrics import transfer_matrix, write_matrix_csv
from .model_zoo import filter_eligible, load_ensemble, load_images, read_manifest, write_manifest
from .store import RecordStore, StoreError
from .suitability import aggregate, percentile_filter, read_scores_csv, score_images, write_scores_csv

U64 = click.IntRange(0, 2**64 - 1)
SETS = ("S", "S_f", "S_h", "Q_low", "Q_mid", "Q_high")


class DataError(click.ClickException):
    exit_code = 1


def data_errors(fn):
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (ValueError, KeyError, OSError, StoreError, json.JSONDecodeError) as exc:
            raise DataError(f"{type(exc).__name__}: {exc}") from exc
    return wrapper


def seed_option(fn):
    return click.option("--seed", type=U64, default=None, help="Master seed (unsigned 64-bit).")(fn)


def _hash(value: str) -> None:
    click.echo(f"plan_hash {value}")


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("filter-eligible")
@click.option("--models", "models", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@seed_option
@data_errors
def filter_eligible_cmd(models, manifest, out, seed):
    """Keep the images every model classifies correctly."""
    plan = ex.CampaignPlan(Path(models), Path(manifest), seed=seed or 0)
    _hash(plan.plan_hash())
    ensemble = load_ensemble(models)
    keep = {x.image_id for x in filter_eligible(ensemble, load_images(manifest))}
    base = Path(manifest).parent.resolve()
    out_dir = Path(out).resolve().parent
    rows = []
    for r in read_manifest(manifest):
        if r["image_id"] in keep:
            path = (base / r["path"]).resolve()
            try:
                rel = path.relative_to(out_dir)
            except ValueError:
                rel = path
            rows.append({**r, "path": str(rel)})
    write_manifest(out, rows)
    click.echo(f"{len(rows)} eligible images")


def _campaign(plan_path, store, seed, workers, parts):
    plan = ex.CampaignPlan.load(plan_path, seed=seed)
    _hash(plan.plan_hash())
    root = store or plan.store
    if root is None:
        raise click.UsageError("no store given on the command line or in the plan")
    st = ex.run_campaign(plan, root, workers=workers, parts=parts)
    click.echo(f"{sum(1 for _ in st.scan())} records in {st.root}")


@main.command()
@click.option("--plan", "plan_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--store", type=click.Path(file_okay=False), default=None)
@click.option("--workers", type=click.IntRange(min=1), default=1)
@seed_option
@data_errors
def attack(plan_path, store, workers, seed):
    """Run the attack shards of a campaign (resumable)."""
    _campaign(plan_path, store, seed, workers, ("attacks",))


@main.command()
@click.option("--plan", "plan_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--store", type=click.Path(file_okay=False), default=None)
@click.option("--workers", type=click.IntRange(min=1), default=1)
@seed_option
@data_errors
def noise(plan_path, store, workers, seed):
    """Run the noise shards of a campaign (resumable)."""
    _campaign(plan_path, store, seed, workers, ("noise",))


@main.command()
@click.option("--models", "models", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@seed_option
@data_errors
def score(models, manifest, out, seed):
    """Per (image, model) prediction-error estimates."""
    plan = ex.CampaignPlan(Path(models), Path(manifest), seed=seed or 0)
    _hash(plan.plan_hash())
    write_scores_csv(out, score_images(load_ensemble(models), load_images(manifest)))


@main.command("toy")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--images", "n_images", type=click.IntRange(min=1), default=300)
@seed_option
@data_errors
def toy_cmd(out, n_images, seed):
    """Train the toy ensemble and write images, manifests and a plan."""
    from .toy import build_toy, write_desk_plan

    info = build_toy(out, seed=seed or 0, n_images=n_images)
    plan_path = write_desk_plan(out, seed=seed or 0)
    _hash(ex.CampaignPlan.load(plan_path).plan_hash())
    click.echo(f"{info['n_eligible']} eligible images in pool; plan at {plan_path}")


# ---------------------------------------------------------------------------
# reports


def _open_store(path, seed) -> RecordStore:
    st = RecordStore.open(path)
    incomplete = [n for n in st.shard_names() if not st.is_complete(n)]
    if incomplete:
        raise DataError(f"campaign not complete; unfinished shards: {', '.join(incomplete)}")
    _hash(st.plan_hash)
    return st


def _subsets(st: RecordStore, names, scores_path, estimate, percentiles) -> dict:
    sets = {"S": st.image_ids}
    if {"S_f", "S_h"} & set(names):
        sets["S_f"], sets["S_h"] = ex.fragile_split_from_store(st)
    if {"Q_low", "Q_mid", "Q_high"} & set(names):
        if not scores_path:
            raise click.UsageError("Q_* subsets need --scores")
        agg = aggregate(read_scores_csv(scores_path), estimate)
        agg = {i: agg[i] for i in st.image_ids if i in agg}
        sets["Q_low"], sets["Q_high"], sets["Q_mid"] = percentile_filter(agg, *percentiles)
    return {name: sets[name] for name in names}


@main.group()
def report():
    """Analysis exports from a completed store."""


@report.command()
@click.option("--store", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--attack", "kind", type=click.Choice(ATTACK_KINDS), default="PGD", show_default=True)
@click.option("--mode", type=click.Choice(["untargeted", "targeted"]), default="untargeted", show_default=True)
@click.option("--set", "subset", type=click.Choice(["S", "S_f", "S_h"]), default="S", show_default=True)
@seed_option
@data_errors
def matrix(store, out, kind, mode, subset, seed):
    """Transfer matrix; the diagonal is the white-box success rate."""
    st = _open_store(store, seed)
    ids = _subsets(st, [subset], None, None, None)[subset]
    recs = ex.attack_records(st.scan([kind]), kind)
    if ids or subset == "S":
        m = transfer_matrix(recs, st.n_models, mode, ids)
    else:
        m = np.full((st.n_models,) * 2, np.nan)
    write_matrix_csv(out, m, st.model_ids)


@report.command()
@click.option("--store", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--attack", "kind", type=click.Choice(ATTACK_KINDS), default=None,
              help="Default: T averaged over attacks.")
@click.option("--bins", type=click.IntRange(min=1), default=None, help="Default: unit bins.")
@seed_option
@data_errors
def histogram(store, out, kind, bins, seed):
    """Images per transferability count."""
    st = _open_store(store, seed)
    counts, edges = ex.histogram_T(st.scan(ATTACK_KINDS), st.image_ids, st.n_models, kind, bins)
    ex.write_histogram_csv(out, counts, edges)


@report.command()
@click.option("--store", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--scores", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--skip-undefined", is_flag=True, help="Leave degenerate cells empty instead of failing.")
@seed_option
@data_errors
def correlation(store, scores, out, skip_undefined, seed):
    """Pearson correlations of transferability, perturbation size and error estimates."""
    st = _open_store(store, seed)
    study = ex.correlation_study(st.records(ATTACK_KINDS), read_scores_csv(scores), st.image_ids, st.model_ids,
                                 skip_undefined)
    ex.write_correlation_csv(out, study)


@report.command()
@click.option("--store", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--n", "n", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--reps", type=click.IntRange(min=1), default=10000, show_default=True)
@click.option("--subset", "subsets", type=click.Choice(SETS), multiple=True, default=("S",), show_default=True)
@click.option("--scores", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--estimate", type=click.Choice(["q_ratio", "one_minus_max", "mse", "wd"]), default="q_ratio")
@click.option("--percentiles", type=(float, float), default=(10.0, 90.0), show_default=True)
@seed_option
@data_errors
def sampling(store, out, n, reps, subsets, scores, estimate, percentiles, seed):
    """Low / average / high transferability and norms over random image samples."""
    st = _open_store(store, seed)
    sets = _subsets(st, list(dict.fromkeys(subsets)), scores, estimate, percentiles)
    recs = st.records(ATTACK_KINDS)
    s = st.meta["seed"] if seed is None else seed
    reports = {name: ex.sampling_study(recs, ids, st.n_models, n, reps, s, st.model_ids)
               for name, ids in sets.items()}
    ex.write_sampling_csv(out, reports)


@report.command()
@click.option("--store", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@seed_option
@data_errors
def split(store, out, seed):
    """Untargeted transfer matrices over all, fragile and hard images."""
    st = _open_store(store, seed)
    fragile, hard = ex.fragile_split_from_store(st)
    rep = ex.split_report(st.records(ATTACK_KINDS), fragile, hard, st.n_models, st.image_ids)
    ex.write_split_csv(out, rep, st.model_ids)
    click.echo(f"{len(fragile)} fragile, {len(hard)} hard")


if __name__ == "__main__":
    sys.exit(main())
