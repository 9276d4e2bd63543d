"""Append-only line-delimited training metrics."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, List

# wall_time varies between otherwise identical runs; comparisons drop it.
VOLATILE_FIELDS = ("wall_time",)


class MetricsWriter:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a")

    def append(self, record: dict) -> None:
        self._fh.write(json.dumps(record, separators=(",", ":")) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> List[dict]:
    path = Path(path)
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def strip_volatile(records: Iterable[dict]) -> List[dict]:
    """Drop per-run fields (wall time) so deterministic traces compare equal."""
    return [{k: v for k, v in r.items() if k not in VOLATILE_FIELDS} for r in records]
