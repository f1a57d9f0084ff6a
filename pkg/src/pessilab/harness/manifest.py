"""Run manifests and tabular artifacts.

A manifest pins everything needed to reproduce a run: configuration
snapshots, seeds, artifact paths (relative to the manifest) and a content
hash. Wall-clock timestamps live under ``meta`` and are excluded from the
hash so reruns with identical inputs hash identically.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from ..exceptions import InvalidConfig

SCHEMA_VERSION = 1
OUT_ENV = "PESSILAB_OUT"


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "pessilab_out"))


def resolve_out(path) -> Path:
    """Relative output paths land under the output root when ``PESSILAB_OUT`` is set."""
    p = Path(path)
    if p.is_absolute() or OUT_ENV not in os.environ:
        return p
    return output_root() / p


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()
    return hashlib.sha256(blob).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    kind: str
    config: dict
    seeds: dict
    artifacts: dict  # name -> path relative to the manifest directory
    inputs_hash: str
    summary: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def hashed_part(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "kind": self.kind,
            "config": self.config,
            "seeds": self.seeds,
            "artifacts": self.artifacts,
            "inputs_hash": self.inputs_hash,
            "summary": self.summary,
            "extra": self.extra,
        }

    @property
    def content_hash(self) -> str:
        return canonical_hash(self.hashed_part())

    def to_dict(self) -> dict:
        return {**self.hashed_part(), "meta": self.meta, "content_hash": self.content_hash}

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise InvalidConfig(f"unsupported manifest schema {d.get('schema_version')!r}")
        m = cls(d["kind"], d["config"], d["seeds"], d["artifacts"], d["inputs_hash"],
                d.get("summary", {}), d.get("extra", {}), d.get("meta", {}))
        if "content_hash" in d and d["content_hash"] != m.content_hash:
            raise InvalidConfig("manifest content hash does not match its contents")
        return m


def save_manifest(m: RunManifest, path, stamp: bool = True):
    path = Path(path)
    base = path.parent
    missing = [name for name, rel in m.artifacts.items() if not (base / rel).exists()]
    if missing:
        raise FileNotFoundError(f"manifest references missing artifacts: {missing}")
    if stamp and "created" not in m.meta:
        m.meta["created"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    with open(path, "w") as fh:
        json.dump(m.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_manifest(path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path) as fh:
        return RunManifest.from_dict(json.load(fh))


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return v


def write_rows(path, rows: list, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_rows(path) -> list:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
