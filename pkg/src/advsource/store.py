"""Append-only campaign store.

Layout::

    <root>/campaign.json        plan hash, seed, schema version, shard flags
    <root>/shards/<name>.jsonl  one record per line

A shard is written by a single process. Records of one run (one image,
source model and kind) go out in a single write, so recovery only has to
cut a torn trailing line and an incomplete trailing run.
"""

from __future__ import annotations

import errno
import json
import logging
import os
from collections import Counter
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Iterator

from .attacks import AttackRecord

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RECORD_FIELDS = ("schema_version", "image_id", "attack_kind", "source_model", "target_model", "success",
                 "targeted_hit", "l2", "linf", "iteration_found", "target_class", "attempt_index", "plan_hash")


class StoreError(RuntimeError):
    pass


class DuplicateKeyError(StoreError):
    pass


class CampaignPaused(StoreError):
    """Raised when the disk is full; nothing past the last complete run is kept."""


def encode_record(rec: AttackRecord) -> str:
    d = asdict(rec)
    d["schema_version"] = SCHEMA_VERSION
    return json.dumps({k: d[k] for k in RECORD_FIELDS}, allow_nan=False)


def decode_record(line: str) -> AttackRecord:
    d = json.loads(line)
    keys = set(d)
    if keys != set(RECORD_FIELDS):
        unknown, missing = keys - set(RECORD_FIELDS), set(RECORD_FIELDS) - keys
        raise StoreError(f"record fields mismatch: unknown {sorted(unknown)}, missing {sorted(missing)}")
    if d.pop("schema_version") != SCHEMA_VERSION:
        raise StoreError("unsupported schema_version")
    return AttackRecord(**d)


def shard_name(kind: str, source: int) -> str:
    return f"{kind}__{'noise' if source < 0 else source}"


class RecordStore:
    def __init__(self, root, plan_hash: str = "", seed: int = 0, n_models: int = 0,
                 model_ids: Iterable[str] = (), image_ids: Iterable[str] = ()):
        self.root = Path(root)
        self.shard_dir = self.root / "shards"
        self.manifest_path = self.root / "campaign.json"
        if self.manifest_path.exists():
            self.meta = json.loads(self.manifest_path.read_text())
            if plan_hash and self.meta["plan_hash"] != plan_hash:
                raise StoreError(f"store {self.root} belongs to plan {self.meta['plan_hash'][:12]}, "
                                 f"not {plan_hash[:12]}")
            if self.meta.get("schema_version") != SCHEMA_VERSION:
                raise StoreError("unsupported store schema_version")
        else:
            if not plan_hash:
                raise StoreError(f"no campaign store at {self.root}")
            self.shard_dir.mkdir(parents=True, exist_ok=True)
            self.meta = {"schema_version": SCHEMA_VERSION, "plan_hash": plan_hash, "seed": int(seed),
                         "n_models": int(n_models), "model_ids": list(model_ids),
                         "image_ids": list(image_ids), "shards": {}}
            self._save_meta()
        self._keys: dict[str, set] = {}
        self._pending: dict[str, list[bytes]] | None = None

    @classmethod
    def open(cls, root) -> "RecordStore":
        return cls(root)

    @property
    def plan_hash(self) -> str:
        return self.meta["plan_hash"]

    @property
    def n_models(self) -> int:
        return self.meta["n_models"]

    @property
    def model_ids(self) -> list[str]:
        return self.meta["model_ids"]

    @property
    def image_ids(self) -> list[str]:
        return self.meta["image_ids"]

    def _save_meta(self) -> None:
        tmp = self.manifest_path.with_suffix(".tmp")
        with open(tmp, "w") as fh:
            json.dump(self.meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.manifest_path)

    def shard_path(self, name: str) -> Path:
        return self.shard_dir / f"{name}.jsonl"

    # -- writing ---------------------------------------------------------

    def _shard_keys(self, name: str) -> set:
        if name not in self._keys:
            self._keys[name] = {r.key for r in self.read_shard(name)}
        return self._keys[name]

    def append(self, record: AttackRecord) -> None:
        self.append_run([record])

    def append_run(self, records: list[AttackRecord]) -> None:
        """Durably append the records of one run to their shard.

        Inside :meth:`batch` the write is deferred to the end of the batch.
        """
        if not records:
            return
        name = shard_name(records[0].attack_kind, records[0].source_model)
        if any(shard_name(r.attack_kind, r.source_model) != name for r in records):
            raise StoreError("records of one run must share a shard")
        keys = self._shard_keys(name)
        new = set()
        for r in records:
            if r.key in keys or r.key in new:
                raise DuplicateKeyError(f"record {r.key} already stored in shard {name}")
            new.add(r.key)
        payload = "".join(encode_record(r) + "\n" for r in records).encode()
        if self._pending is not None:
            self._pending.setdefault(name, []).append(payload)
        else:
            self._write(name, payload)
        keys.update(new)

    def _write(self, name: str, payload: bytes) -> None:
        try:
            with open(self.shard_path(name), "ab") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            self._keys.pop(name, None)
            if exc.errno == errno.ENOSPC:
                self.recover_shard(name)
                raise CampaignPaused(f"disk full while writing shard {name}") from exc
            raise

    @contextmanager
    def batch(self):
        """Group commit: appends inside the block reach disk with one fsync per shard on exit.

        If the block raises, nothing from it is written.
        """
        if self._pending is not None:
            yield self
            return
        self._pending = {}
        try:
            yield self
        except BaseException:
            for name in self._pending:
                self._keys.pop(name, None)
            raise
        else:
            for name, chunks in self._pending.items():
                self._write(name, b"".join(chunks))
        finally:
            self._pending = None

    def mark_complete(self, name: str) -> None:
        path = self.shard_path(name)
        if path.exists():
            with open(path, "rb") as fh:
                os.fsync(fh.fileno())
        self.meta["shards"][name] = {"complete": True}
        self._save_meta()

    def is_complete(self, name: str) -> bool:
        return self.meta["shards"].get(name, {}).get("complete", False)

    # -- reading ---------------------------------------------------------

    def shard_names(self) -> list[str]:
        if not self.shard_dir.exists():
            return []
        return sorted(p.stem for p in self.shard_dir.glob("*.jsonl"))

    def read_shard(self, name: str) -> list[AttackRecord]:
        path = self.shard_path(name)
        if not path.exists():
            return []
        with open(path) as fh:
            return [decode_record(line) for line in fh if line.strip()]

    def scan(self, kinds: Iterable[str] | None = None) -> Iterator[AttackRecord]:
        wanted = set(kinds) if kinds is not None else None
        for name in self.shard_names():
            if wanted is None or name.split("__")[0] in wanted:
                yield from self.read_shard(name)

    def records(self, kinds: Iterable[str] | None = None) -> list[AttackRecord]:
        return list(self.scan(kinds))

    def done_runs(self, name: str) -> set[tuple[str, int, str]]:
        return {(r.image_id, r.source_model, r.attack_kind) for r in self.read_shard(name)}

    # -- recovery --------------------------------------------------------

    def recover_shard(self, name: str) -> int:
        """Cut a torn last line and any incomplete trailing run; returns bytes removed."""
        path = self.shard_path(name)
        if not path.exists():
            return 0
        data = path.read_bytes()
        end = data.rfind(b"\n") + 1
        lines = data[:end].splitlines(keepends=True)
        per_run = Counter()
        starts = {}
        offset = 0
        for line in lines:
            r = decode_record(line.decode())
            run = (r.image_id, r.source_model, r.attack_kind)
            starts.setdefault(run, offset)
            per_run[run] += 1
            offset += len(line)
        if lines and self.n_models:
            last = decode_record(lines[-1].decode())
            run = (last.image_id, last.source_model, last.attack_kind)
            if per_run[run] < self.n_models:
                end = starts[run]
        removed = len(data) - end
        if removed:
            logger.warning("recovering shard %s: dropping %d trailing bytes", name, removed)
            with open(path, "r+b") as fh:
                fh.truncate(end)
                fh.flush()
                os.fsync(fh.fileno())
            self._keys.pop(name, None)
        return removed

    def recover(self) -> int:
        return sum(self.recover_shard(n) for n in self.shard_names())
