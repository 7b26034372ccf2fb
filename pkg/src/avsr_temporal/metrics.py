"""WER and the noise-grid aggregates (N-WER and noise-dominant N-WER)."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .kernels import edit_distance

CATEGORIES = ("babble", "speech", "music", "natural")
SNR_GRID = (-10, -5, 0, 5, 10)
NOISE_DOMINANT_SNRS = (-10, -5, 0)
MERGED = "music+natural"

# a merged music+natural column stands for two noise categories
CATEGORY_WEIGHT = {MERGED: 2}


class MetricError(ValueError):
    pass


class IncompleteTableError(MetricError):
    pass


def _distance(ref: Sequence, hyp: Sequence) -> int:
    # the compiled kernel compares int64 ids; intern anything else first
    if not all(isinstance(t, (int, np.integer)) for t in (*ref, *hyp)):
        ids: dict = {}
        ref = [ids.setdefault(t, len(ids)) for t in ref]
        hyp = [ids.setdefault(t, len(ids)) for t in hyp]
    return edit_distance(ref, hyp)


def wer(reference: Sequence, hypothesis: Sequence) -> float:
    """Word (token) error rate in percent: 100 * edits / len(reference)."""
    if len(reference) == 0:
        raise MetricError("WER is undefined for an empty reference")
    return 100.0 * _distance(reference, hypothesis) / len(reference)


def corpus_wer(references: Iterable[Sequence], hypotheses: Iterable[Sequence]) -> float:
    """Pooled WER: total edits over total reference length."""
    edits = words = 0
    for ref, hyp in zip(references, hypotheses, strict=True):
        if len(ref) == 0:
            raise MetricError("WER is undefined for an empty reference")
        edits += _distance(ref, hyp)
        words += len(ref)
    if words == 0:
        raise MetricError("no references")
    return 100.0 * edits / words


@dataclass
class EvalTable:
    """WER per (noise category, SNR) cell, plus the optional clean score."""

    cells: dict[tuple[str, int], float] = field(default_factory=dict)
    clean: float | None = None

    def categories(self) -> list[str]:
        seen: list[str] = []
        for cat, _ in self.cells:
            if cat not in seen:
                seen.append(cat)
        return seen

    def category_average(self, category: str, snrs: Sequence[int] = SNR_GRID) -> float:
        missing = [s for s in snrs if (category, s) not in self.cells]
        if missing:
            raise IncompleteTableError(f"{category}: missing SNR cells {missing}")
        return sum(self.cells[(category, s)] for s in snrs) / len(snrs)

    @classmethod
    def from_rows(cls, rows: Mapping[str, Sequence[float]], clean: float | None = None,
                  snrs: Sequence[int] = SNR_GRID) -> "EvalTable":
        cells = {}
        for cat, values in rows.items():
            if len(values) != len(snrs):
                raise IncompleteTableError(f"{cat}: expected {len(snrs)} cells, got {len(values)}")
            cells.update({(cat, s): float(v) for s, v in zip(snrs, values)})
        return cls(cells, clean)


def _weights(categories: Iterable[str]) -> dict[str, int]:
    return {c: CATEGORY_WEIGHT.get(c, 1) for c in categories}


def _check_coverage(weights: Mapping[str, int]) -> None:
    if sum(weights.values()) != len(CATEGORIES):
        raise IncompleteTableError(
            f"table covers {sum(weights.values())} noise categories, need {len(CATEGORIES)}")


def _grid_mean(table: EvalTable, snrs: Sequence[int]) -> float:
    weights = _weights(table.categories())
    _check_coverage(weights)
    total = sum(w * table.category_average(c, snrs) for c, w in weights.items())
    return total / sum(weights.values())


def nwer(table: EvalTable) -> float:
    """Mean WER over the 4 noise categories x 5 SNR levels."""
    return _grid_mean(table, SNR_GRID)


def nwer_noise_dominant(table: EvalTable) -> float:
    """Mean WER restricted to the non-positive SNRs {-10, -5, 0}."""
    return _grid_mean(table, NOISE_DOMINANT_SNRS)


def nwer_from_category_averages(averages: Mapping[str, float]) -> float:
    """N-WER from per-category averages, as published tables report them."""
    weights = _weights(averages)
    _check_coverage(weights)
    return sum(w * averages[c] for c, w in weights.items()) / sum(weights.values())


@dataclass
class AggregateReport:
    category_avg: dict[str, float]
    category_noise_dominant: dict[str, float]
    nwer: float
    nwer_noise_dominant: float
    clean: float | None = None


def aggregate(table: EvalTable) -> AggregateReport:
    cats = table.categories()
    return AggregateReport(
        category_avg={c: table.category_average(c) for c in cats},
        category_noise_dominant={c: table.category_average(c, NOISE_DOMINANT_SNRS) for c in cats},
        nwer=nwer(table),
        nwer_noise_dominant=nwer_noise_dominant(table),
        clean=table.clean,
    )


# ---------------------------------------------------------------- emission


def _category_rank(category: str) -> tuple[int, str]:
    order = CATEGORIES + (MERGED,)
    return (order.index(category) if category in order else len(order), category)


def records(table: EvalTable, report: AggregateReport, meta: Mapping | None = None) -> list[dict]:
    """One record per cell and per aggregate."""
    base = dict(meta or {})
    out = [dict(base, kind="cell", category=c, snr_db=s, wer=w)
           for (c, s), w in sorted(table.cells.items(), key=lambda kv: (_category_rank(kv[0][0]), kv[0][1]))]
    if table.clean is not None:
        out.append(dict(base, kind="cell", category="clean", snr_db=None, wer=table.clean))
    for c, v in report.category_avg.items():
        out.append(dict(base, kind="category_avg", category=c, wer=v))
    for c, v in report.category_noise_dominant.items():
        out.append(dict(base, kind="category_noise_dominant", category=c, wer=v))
    out.append(dict(base, kind="nwer", wer=report.nwer))
    out.append(dict(base, kind="nwer_noise_dominant", wer=report.nwer_noise_dominant))
    return out


def write_records(path: Path, recs: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in recs:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_records(path: Path) -> tuple[EvalTable, AggregateReport, dict]:
    """Rebuild the table from cell records; returns the stored aggregates and
    the shared metadata alongside it."""
    table = EvalTable()
    stored: dict = {"category_avg": {}, "category_noise_dominant": {}}
    meta: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            kind = r.pop("kind")
            if kind == "cell":
                if r["category"] == "clean":
                    table.clean = r["wer"]
                else:
                    table.cells[(r["category"], int(r["snr_db"]))] = r["wer"]
            elif kind in ("category_avg", "category_noise_dominant"):
                stored[kind][r["category"]] = r["wer"]
            else:
                stored[kind] = r["wer"]
            meta = {k: v for k, v in r.items() if k not in ("category", "snr_db", "wer")}
    report = AggregateReport(stored["category_avg"], stored["category_noise_dominant"],
                             stored["nwer"], stored["nwer_noise_dominant"], table.clean)
    return table, report, meta


def format_table(table: EvalTable, report: AggregateReport, label: str = "model") -> str:
    """One tab-delimited row: a WER column per (noise source, SNR), the per-source
    averages, the aggregates and the clean WER."""
    header = ["method"]
    row: list[str] = [label]
    for c in table.categories():
        header += [f"{c}@{s}" for s in SNR_GRID] + [f"{c}:AVG"]
        row += [f"{table.cells[(c, s)]:.2f}" for s in SNR_GRID] + [f"{report.category_avg[c]:.2f}"]
    header += ["N-WER:AVG", "N-WER:N>=S", "clean"]
    row += [f"{report.nwer:.2f}", f"{report.nwer_noise_dominant:.2f}",
            "-" if table.clean is None else f"{table.clean:.2f}"]
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(header)
    w.writerow(row)
    return buf.getvalue()
