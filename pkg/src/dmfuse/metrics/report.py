"""Metric records, batch evaluation and CSV / text-table emitters."""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ..imaging import luma
from . import indicators as ind

# reporting column order
COLUMNS = (
    ("sf", "SF"),
    ("sd", "SD"),
    ("ag", "AG"),
    ("q_w", "Q_W"),
    ("scd", "SCD"),
    ("viff", "VIFF"),
    ("q_abf", "Q_AB/F"),
    ("msssim", "MSSSIM"),
    ("fmi_wt", "FMI_WT"),
)
METRIC_FIELDS = tuple(k for k, _ in COLUMNS)
METRIC_HEADERS = tuple(h for _, h in COLUMNS)


@dataclass(frozen=True)
class MetricReport:
    sf: float
    sd: float
    ag: float
    q_w: float
    scd: float
    viff: float
    q_abf: float
    msssim: float
    fmi_wt: float
    pair_id: str = ""

    def __post_init__(self):
        for name in METRIC_FIELDS:
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite for pair {self.pair_id!r}")

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k in METRIC_FIELDS)

    def as_dict(self) -> dict:
        return {"pair_id": self.pair_id, **{k: getattr(self, k) for k in METRIC_FIELDS}}


def evaluate_pair(a, b, f, pair_id: str = "") -> MetricReport:
    """All nine indicators for one registered triplet, computed on luma."""
    a, b, f = luma(a), luma(b), luma(f)
    if not (a.shape == b.shape == f.shape):
        raise ValueError(f"size mismatch for pair {pair_id!r}: {a.shape}, {b.shape}, {f.shape}")
    ms = 0.5 * (ind.msssim(a, f) + ind.msssim(b, f))
    return MetricReport(
        sf=ind.spatial_frequency(f),
        sd=ind.standard_deviation(f),
        ag=ind.average_gradient(f),
        q_w=ind.q_w(a, b, f),
        scd=ind.scd(a, b, f),
        viff=ind.viff(a, b, f),
        q_abf=ind.q_abf(a, b, f),
        msssim=ms,
        fmi_wt=ind.fmi_wt(a, b, f),
        pair_id=pair_id,
    )


def default_threads() -> int:
    raw = os.environ.get("DMFUSE_THREADS")
    if raw:
        return max(1, int(raw))
    return max(1, min(4, os.cpu_count() or 1))


def evaluate_batch(triplets: Sequence[tuple], threads: Optional[int] = None) -> list[MetricReport]:
    """Evaluate ``(pair_id, A, B, F)`` tuples; results keep the input order."""
    threads = threads or default_threads()

    def one(item):
        pid, a, b, f = item
        return evaluate_pair(a, b, f, pid)

    if threads == 1 or len(triplets) < 2:
        return [one(t) for t in triplets]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, triplets))


def mean_report(reports: Sequence[MetricReport], label: str = "mean") -> MetricReport:
    if not reports:
        raise ValueError("cannot average an empty report list")
    arr = np.array([r.values() for r in reports], dtype=np.float64)
    return MetricReport(*arr.mean(axis=0).tolist(), pair_id=label)


def write_csv(path, reports: Sequence[MetricReport], mean_label: Optional[str] = "mean") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(reports)
    if mean_label and rows:
        rows.append(mean_report(rows, mean_label))
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["pair_id", *METRIC_HEADERS])
        for r in rows:
            writer.writerow([r.pair_id, *(f"{v:.6f}" for v in r.values())])


def read_csv(path) -> list[MetricReport]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[1:]) != METRIC_HEADERS:
            raise ValueError(f"unexpected metric columns {header[1:]}")
        return [MetricReport(*(float(v) for v in row[1:]), pair_id=row[0]) for row in reader]


def format_table(rows: Iterable[tuple[str, MetricReport]], title: str = "",
                 label_header: str = "Experiments", decimals: int = 3,
                 extra: Optional[dict[str, Sequence[str]]] = None) -> str:
    """Fixed-width table in reporting column order; the best value per column gets a ``*``.

    Every indicator here is higher-is-better.  ``extra`` maps a header to
    preformatted per-row cells appended after the metrics (not ranked).
    """
    rows = list(rows)
    best = {}
    if len(rows) > 1:
        for k in METRIC_FIELDS:
            best[k] = max(getattr(r, k) for _, r in rows)
    label_w = max([len(label_header)] + [len(lbl) for lbl, _ in rows])
    col_w = max(8, decimals + 6)
    lines = []
    if title:
        lines.append(title)
    extra = extra or {}
    extra_w = {h: max(len(h), *(len(c) for c in cells)) + 2 for h, cells in extra.items()}
    lines.append(label_header.ljust(label_w) + "".join(h.rjust(col_w + 1) for h in METRIC_HEADERS)
                 + "".join(h.rjust(extra_w[h]) for h in extra))
    lines.append("-" * len(lines[-1]))
    for i, (label, r) in enumerate(rows):
        cells = []
        for k in METRIC_FIELDS:
            v = getattr(r, k)
            mark = "*" if k in best and v == best[k] else " "
            cells.append(f"{v:.{decimals}f}{mark}".rjust(col_w + 1))
        cells += [extra[h][i].rjust(extra_w[h]) for h in extra]
        lines.append(label.ljust(label_w) + "".join(cells))
    return "\n".join(lines) + "\n"
