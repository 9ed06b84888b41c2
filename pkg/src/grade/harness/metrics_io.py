"""Append-only CSV metrics files.

Line 1 is a comment carrying the schema version and a creation timestamp;
it is the only line that may differ between otherwise identical runs.
"""
from __future__ import annotations

import csv
import datetime as _dt
import math
import os

SCHEMA_VERSION = 1
PHASES = ("pretrain", "train", "eval")
COLUMNS = (
    "phase", "epoch", "iteration", "loss", "objective", "mean_reward", "mean_post", "mean_prior",
    "mean_format", "mean_kl", "clip_fraction", "hat_alpha",
    "ndcg_ctr", "ndcg_cvr", "ndcg_opm", "ndcg_gpm",
)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


class MetricsWriter:
    def __init__(self, path, columns=COLUMNS, created: str | None = None):
        self.path = path
        self.columns = tuple(columns)
        self._last = None
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        stamp = created or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write(f"# grade-metrics schema={SCHEMA_VERSION} created={stamp}\n")
            csv.writer(f, lineterminator="\n").writerow(self.columns)

    def write(self, **row) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown metric columns {sorted(unknown)}")
        if "phase" in row:
            key = (PHASES.index(row["phase"]), row.get("epoch", 0), row.get("iteration", 0))
            if self._last is not None and key < self._last:
                raise ValueError(f"metrics row {key} out of order after {self._last}")
            self._last = key
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow([_cell(row.get(c)) for c in self.columns])


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        first = f.readline()
        if not first.startswith("# grade-metrics"):
            raise ValueError(f"{path}: missing metrics header")
        return list(csv.DictReader(f))


def write_table(path, rows: list[dict], columns) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])


def format_table(rows: list[dict], columns, digits: int = 4) -> str:
    def show(v):
        return f"{v:.{digits}f}" if isinstance(v, float) else str(v)

    cells = [[str(c) for c in columns]] + [[show(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
