"""Evaluation reports: a versioned JSON document and its table rendering."""

import itertools
import json
import pathlib
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

from ..common.constants import Constants
from ..common.errors import DataError, EmptyReport, IoFailure, malformed
from .benchmark_service import BenchResult, compare_benchmarks
from .metrics_service import ClsScores, SegScores

METRICS = ("PA", "DC", "CA", "CF1")
SPLIT_ORDER = ("val", "test")
_CELL = 7


@dataclass(frozen=True)
class ReportEntry:
    model: str
    scenario: int
    split: str
    seg: SegScores
    cls: ClsScores
    tiles: int

    @property
    def key(self) -> Tuple[str, int, str]:
        return self.model, self.scenario, self.split

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "scenario": self.scenario,
            "split": self.split,
            "tiles": self.tiles,
            "segmentation": self.seg.to_dict(),
            "classification": self.cls.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ReportEntry":
        return cls(
            model=data["model"],
            scenario=int(data["scenario"]),
            split=data["split"],
            seg=SegScores.from_dict(data["segmentation"]),
            cls=ClsScores.from_dict(data["classification"]),
            tiles=int(data["tiles"]),
        )


@dataclass(frozen=True)
class EvalReport:
    entries: Tuple[ReportEntry, ...] = field(default_factory=tuple)
    benchmarks: Tuple[BenchResult, ...] = field(default_factory=tuple)

    def with_entry(self, entry: ReportEntry) -> "EvalReport":
        """Add ``entry``, replacing any entry for the same (model, scenario, split)."""
        kept = tuple(e for e in self.entries if e.key != entry.key)
        return replace(self, entries=kept + (entry,))

    def with_benchmarks(self, results) -> "EvalReport":
        return replace(self, benchmarks=self.benchmarks + tuple(results))

    def to_dict(self) -> dict:
        return {
            "schema": Constants.EVAL_REPORT_SCHEMA,
            "entries": [e.to_dict() for e in self.entries],
            "benchmarks": [b.to_dict() for b in self.benchmarks],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        with malformed("evaluation report"):
            if data.get("schema") != Constants.EVAL_REPORT_SCHEMA:
                raise DataError(f"unsupported report schema {data.get('schema')!r}")
            return cls(
                entries=tuple(ReportEntry.from_dict(e) for e in data.get("entries", [])),
                benchmarks=tuple(BenchResult.from_dict(b) for b in data.get("benchmarks", [])),
            )


def serialize_report(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def parse_report(text: str) -> EvalReport:
    try:
        return EvalReport.from_dict(json.loads(text))
    except json.JSONDecodeError as e:
        raise DataError(f"not an evaluation report: {e}") from e


def save_report(report: EvalReport, path) -> None:
    try:
        pathlib.Path(path).write_text(serialize_report(report))
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_report(path) -> EvalReport:
    try:
        return parse_report(pathlib.Path(path).read_text())
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _pct(value: Optional[float]) -> str:
    return f"{'-':>{_CELL}}" if value is None else f"{100.0 * value:{_CELL}.2f}"


def _unique(values) -> List:
    seen = []
    for value in values:
        if value not in seen:
            seen.append(value)
    return seen


def _split_rank(split: str) -> Tuple[int, str]:
    return (SPLIT_ORDER.index(split), "") if split in SPLIT_ORDER else (len(SPLIT_ORDER), split)


def _metrics_table(report: EvalReport, width: int) -> List[str]:
    models = _unique(e.model for e in report.entries)
    scenarios = sorted({e.scenario for e in report.entries})
    splits = sorted({e.split for e in report.entries}, key=_split_rank)
    by_key = {e.key: e for e in report.entries}

    top = " " * (width + 5) + "".join(f" | {f'{s} channels':>{_CELL * len(METRICS)}}" for s in scenarios)
    head = f"{'Model':<{width}}{'Set':<5}" + "".join(
        " | " + "".join(f"{m:>{_CELL}}" for m in METRICS) for _ in scenarios
    )
    lines = [top, head, "-" * len(head)]
    for model in models:
        for row, split in enumerate(splits):
            label = model if row == 0 else ""
            line = f"{label:<{width}}{split:<5}"
            for scenario in scenarios:
                entry = by_key.get((model, scenario, split))
                if entry is None:
                    cells = [None] * len(METRICS)
                else:
                    cells = [entry.seg.pixel_accuracy, entry.seg.dice_macro, entry.cls.accuracy, entry.cls.f1]
                line += " | " + "".join(_pct(c) for c in cells)
            lines.append(line)
    return lines


def _bench_table(report: EvalReport, width: int) -> List[str]:
    head = (f"{'Model':<{width}}{'Ch':>4}{'Params':>9}{'Mem KB':>10}{'Disk KB':>10}"
            f"{'MMACs':>10}{'Mean s':>10}{'Min s':>10}{'Max s':>10}")
    lines = ["Model size and inference time", head, "-" * len(head)]
    for b in report.benchmarks:
        lines.append(
            f"{b.model_name:<{width}}{b.channels:>4}{b.size.parameter_count:>9}"
            f"{b.size.bytes_in_memory / 1000:>10.1f}{b.size.bytes_on_disk / 1000:>10.1f}"
            f"{b.size.macs / 1e6:>10.2f}{b.mean_seconds:>10.4f}{b.min_seconds:>10.4f}{b.max_seconds:>10.4f}"
        )
    for first, second in itertools.combinations(report.benchmarks, 2):
        if first.channels != second.channels or first.model_name == second.model_name:
            continue
        slow, fast = (first, second) if first.mean_seconds >= second.mean_seconds else (second, first)
        cmp = compare_benchmarks(slow, fast)
        lines.append(
            f"At {cmp.channels} channels {cmp.candidate} runs {cmp.speedup:.1f}x faster than "
            f"{cmp.baseline} with {cmp.memory_ratio:.2f}x its memory and {cmp.disk_ratio:.2f}x its disk size"
        )
    return lines


def render_report(report: EvalReport) -> str:
    """Text tables: one row group per model, one column block per channel scenario."""
    if not report.entries and not report.benchmarks:
        raise EmptyReport("the report has no entries")
    names = [e.model for e in report.entries] + [b.model_name for b in report.benchmarks]
    width = max(len("Model"), *(len(n) for n in names)) + 2
    lines = [
        f"Evaluation report ({Constants.EVAL_REPORT_SCHEMA})",
        "PA pixel accuracy, DC macro Dice, CA tile accuracy, CF1 tile F1 (percent)",
    ]
    if report.entries:
        lines += [""] + _metrics_table(report, width)
    if report.benchmarks:
        lines += [""] + _bench_table(report, width)
    return "\n".join(lines) + "\n"
