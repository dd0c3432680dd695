"""CSV tables with fixed headers per experiment kind."""
from __future__ import annotations

import csv
import io
import math
from typing import Iterable, Sequence

HEADERS: dict[str, tuple[str, ...]] = {
    "loss": ("stage", "step", "loss", "lr_ttt", "lr_other"),
    "rollout": ("step", "horizon", "mse_mean", "mse_std", "seeds"),
    "layout": ("layout", "seed", "val_mse", "diverged"),
    "layout_summary": ("layout", "val_mse_mean", "val_mse_std", "diverged_runs", "seeds"),
    "modules": ("variant", "use_ttt", "use_mp", "val_mse", "success_rate", "episodes"),
    "mpc": ("task", "condition", "episodes", "successes", "success_rate"),
    "mpc_summary": ("condition", "episodes", "success_rate", "delta_vs_policy"),
    "mp_effect": ("seed", "use_mp", "horizon", "mse"),
}


def fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "nan"
        return format(v, ".10g")
    return str(v)


class MetricsTable:
    def __init__(self, kind: str, rows: Iterable[Sequence] = ()):
        if kind not in HEADERS:
            raise KeyError(f"unknown table kind {kind!r}")
        self.kind = kind
        self.header = HEADERS[kind]
        self.rows: list[tuple] = []
        for r in rows:
            self.add(*r)

    def add(self, *row) -> None:
        if len(row) != len(self.header):
            raise ValueError(f"{self.kind}: expected {len(self.header)} cells, got {len(row)}")
        self.rows.append(tuple(row))

    def column(self, name: str) -> list:
        i = self.header.index(name)
        return [r[i] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for r in self.rows:
            w.writerow([fmt(c) for c in r])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read(cls, kind: str, path) -> "MetricsTable":
        with open(path, encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if tuple(rows[0]) != HEADERS[kind]:
            raise ValueError(f"header mismatch for {kind}")
        return cls(kind, rows[1:])
