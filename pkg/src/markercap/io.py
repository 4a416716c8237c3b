"""Deterministic JSON/JSONL serialization and the run manifest."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np


def _default(obj: Any):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dumps(obj: Any) -> str:
    """Canonical compact JSON (sorted keys, repr-exact floats)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_default, allow_nan=True)


def write_json(path, obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1, default=_default) + "\n")


def read_json(path) -> Any:
    return json.loads(Path(path).read_text())


def write_jsonl(path, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")
            n += 1
    return n


def iter_jsonl(path) -> Iterator[dict]:
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def read_jsonl(path) -> list[dict]:
    return list(iter_jsonl(path))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Per-stage input and output hashes, chained in pipeline order.

    Rerunning a stage replaces its entry; the chain is recomputed from the
    first stage, so any upstream change alters every later hash and the head.
    """

    def __init__(self, order: Iterable[str], header: dict | None = None) -> None:
        self.order = list(order)
        self.header = header or {}
        self.stages: dict[str, dict] = {}

    def record(self, stage: str, inputs: Iterable, outputs: Iterable, params: dict | None = None) -> str:
        if stage not in self.order:
            raise ValueError(f"unknown stage {stage!r}")
        self.stages[stage] = {
            "inputs": {Path(p).name: file_sha256(p) for p in sorted(map(str, inputs))},
            "outputs": {Path(p).name: file_sha256(p) for p in sorted(map(str, outputs))},
            "params": params or {},
        }
        return self.chain()[stage]

    def chain(self) -> dict[str, str]:
        prev = hashlib.sha256(dumps(self.header).encode()).hexdigest()
        out = {}
        for stage in self.order:
            if stage in self.stages:
                prev = hashlib.sha256(dumps({"stage": stage, "prev": prev, **self.stages[stage]}).encode()).hexdigest()
                out[stage] = prev
        return out

    @property
    def head(self) -> str:
        chain = self.chain()
        return chain[[s for s in self.order if s in chain][-1]] if chain else hashlib.sha256(dumps(self.header).encode()).hexdigest()

    def to_dict(self) -> dict:
        chain = self.chain()
        return {
            "header": self.header,
            "stages": [{"stage": s, **self.stages[s], "hash": chain[s]} for s in self.order if s in self.stages],
            "head": self.head,
        }

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path, order: Iterable[str]) -> "Manifest":
        d = read_json(path)
        m = cls(order, d.get("header", {}))
        for e in d.get("stages", []):
            m.stages[e["stage"]] = {k: e[k] for k in ("inputs", "outputs", "params")}
        return m
