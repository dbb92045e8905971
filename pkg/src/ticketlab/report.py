"""Experiment reports: per-seed rows, mean/std aggregates, CSV and JSON output."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .trainer import EvalResult

COLUMNS = ("yesno", "number", "other", "overall")
CSV_HEADER = ("variant", "seed", *COLUMNS, "status")

DISCLAIMER = (
    "Desk-scale synthetic VQA analog. Row mapping to the full-scale results table: "
    "dense -> fine-tuned full model, low_magnitude -> IMP ticket, "
    "high_magnitude -> complement of the ticket, random -> random mask of equal size. "
    "Absolute accuracies are not comparable with full-scale VQA numbers."
)


class Variant(str, Enum):
    DENSE = "dense"
    LOW = "low_magnitude"
    HIGH = "high_magnitude"
    RANDOM = "random"


@dataclass
class RunRow:
    variant: Variant
    seed: int
    result: EvalResult | None
    status: str = "ok"
    surviving: int | None = None
    rewind_digest: str | None = None
    note: str = ""

    def value(self, col: str) -> float:
        return getattr(self.result, col)


def mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n-1); std is 0 for a single value."""
    if not values:
        raise ValueError("no values")
    m = statistics.fmean(values)
    return m, (statistics.stdev(values) if len(values) > 1 else 0.0)


@dataclass
class ExperimentReport:
    sparsity: float
    seeds: list[int]
    rows: list[RunRow] = field(default_factory=list)
    init_digest: str = ""
    notes: list[str] = field(default_factory=lambda: [DISCLAIMER])
    metadata: dict = field(default_factory=dict)

    def variants(self) -> list[Variant]:
        seen = []
        for r in self.rows:
            if r.variant not in seen:
                seen.append(r.variant)
        return seen

    def rows_for(self, variant: Variant) -> list[RunRow]:
        return [r for r in self.rows if r.variant == variant]

    def aggregate(self, variant: Variant) -> dict[str, tuple[float, float]] | None:
        ok = [r for r in self.rows_for(Variant(variant)) if r.status == "ok"]
        if not ok:
            return None
        return {c: mean_std([r.value(c) for r in ok]) for c in COLUMNS}

    def mean(self, variant: Variant, col: str = "overall") -> float:
        agg = self.aggregate(variant)
        if agg is None:
            raise ValueError(f"no successful runs for {variant}")
        return agg[col][0]

    def surviving_counts(self) -> dict[str, int]:
        out = {}
        for r in self.rows:
            if r.surviving is not None:
                out.setdefault(r.variant.value, r.surviving)
        return out

    def to_dict(self) -> dict:
        return {
            "sparsity": self.sparsity,
            "seeds": self.seeds,
            "init_digest": self.init_digest,
            "notes": self.notes,
            "metadata": self.metadata,
            "rows": [
                {"variant": r.variant.value, "seed": r.seed, "status": r.status,
                 "surviving": r.surviving, "rewind_digest": r.rewind_digest, "note": r.note,
                 **({c: r.value(c) for c in COLUMNS} if r.result else {}),
                 **({"correct": list(r.result.correct), "counts": list(r.result.counts)}
                    if r.result else {})}
                for r in self.rows
            ],
            "aggregate": {
                v.value: ({c: {"mean": m, "std": s} for c, (m, s) in agg.items()}
                          if (agg := self.aggregate(v)) else None)
                for v in self.variants()
            },
        }


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def report_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for v in report.variants():
        for r in report.rows_for(v):
            if r.status == "ok":
                w.writerow([v.value, r.seed, *(_fmt(r.value(c)) for c in COLUMNS), "ok"])
            else:
                w.writerow([v.value, r.seed, *([""] * len(COLUMNS)), r.status])
        agg = report.aggregate(v)
        for k, label in ((0, "mean"), (1, "std")):
            if agg is None:
                w.writerow([v.value, label, *([""] * len(COLUMNS)), "failed"])
            else:
                w.writerow([v.value, label, *(_fmt(agg[c][k]) for c in COLUMNS), "ok"])
    return buf.getvalue()


def emit_report(report: ExperimentReport, path, format: str = "csv") -> Path:  # noqa: A002
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "csv":
        path.write_text(report_csv(report))
    elif format in ("json", "structured-text"):
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    else:
        raise ValueError(f"unknown report format {format!r}")
    return path


def read_report_csv(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))


# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    target: float
    actual_sparsity: float
    overalls: list[float]
    status: str = "ok"

    @property
    def mean(self) -> float:
        return mean_std(self.overalls)[0]

    @property
    def std(self) -> float:
        return mean_std(self.overalls)[1]


@dataclass
class SweepReport:
    rows: list[SweepRow]
    seeds: list[int]
    mode: str
    nested: bool
    notes: list[str] = field(default_factory=list)

    def row(self, target: float) -> SweepRow:
        for r in self.rows:
            if abs(r.target - target) < 1e-9:
                return r
        raise KeyError(target)


def sweep_csv(report: SweepReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("target", "actual_sparsity", "mean_overall", "std_overall", "n_seeds", "status"))
    for r in report.rows:
        if r.status == "ok" and r.overalls:
            w.writerow([_fmt(r.target), _fmt(r.actual_sparsity), _fmt(r.mean), _fmt(r.std),
                        len(r.overalls), r.status])
        else:
            w.writerow([_fmt(r.target), _fmt(r.actual_sparsity), "", "", len(r.overalls), "failed"])
    return buf.getvalue()
