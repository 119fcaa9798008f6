"""Per-tile inference timing paired with model size."""

import json
import logging
import pathlib
from dataclasses import dataclass
from time import perf_counter
from typing import Callable, List, Optional, Sequence

import numpy as np

from ..common.constants import Constants
from ..common.errors import DataError, EmptyInput, IoFailure, malformed
from .hypercube_service import Tile
from .model_service import ModelGraph, ModelKind, SizeReport, size_report
from .pipeline_service import (
    ChannelScenario,
    classify_spectra,
    crop_offsets,
    default_scenario,
    prepare_input,
    stitch_crops,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchResult:
    model_name: str
    model_kind: str
    channels: int
    tiles: int
    repetitions: int
    mean_seconds: float
    min_seconds: float
    max_seconds: float
    size: SizeReport

    def to_dict(self) -> dict:
        return {
            "schema": Constants.BENCH_SCHEMA,
            "model_name": self.model_name,
            "model_kind": self.model_kind,
            "channels": self.channels,
            "tiles": self.tiles,
            "repetitions": self.repetitions,
            "mean_seconds": self.mean_seconds,
            "min_seconds": self.min_seconds,
            "max_seconds": self.max_seconds,
            "size": self.size.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BenchResult":
        with malformed("benchmark result"):
            if data.get("schema", Constants.BENCH_SCHEMA) != Constants.BENCH_SCHEMA:
                raise DataError(f"unsupported benchmark schema {data.get('schema')!r}")
            return cls(
                model_name=data["model_name"],
                model_kind=data["model_kind"],
                channels=int(data["channels"]),
                tiles=int(data["tiles"]),
                repetitions=int(data["repetitions"]),
                mean_seconds=float(data["mean_seconds"]),
                min_seconds=float(data["min_seconds"]),
                max_seconds=float(data["max_seconds"]),
                size=SizeReport.from_dict(data["size"]),
            )


@dataclass(frozen=True)
class BenchComparison:
    baseline: str
    candidate: str
    channels: int
    # baseline seconds per tile / candidate seconds per tile
    speedup: float
    memory_ratio: float
    disk_ratio: float


def _runner(model: ModelGraph, tile: Tile, scenario: ChannelScenario, pixel_batch: int) -> Callable[[], object]:
    """Prepare a tile once and return a closure running only the model on it."""
    batch = prepare_input(tile, scenario, model.input_shape[0]).astype(model.dtype)
    if model.kind == ModelKind.UNET_2D:
        offsets = crop_offsets(tile.size, model.input_shape[0])
        return lambda: stitch_crops(model, batch, offsets, tile.size)
    return lambda: classify_spectra(model, batch, pixel_batch)


def benchmark(
    model: ModelGraph,
    tiles: Sequence[Tile],
    scenario: Optional[ChannelScenario] = None,
    repetitions: int = 1,
    pixel_batch: int = 1,
    warmup: bool = True,
) -> BenchResult:
    """Wall-clock seconds per tile on a monotonic clock.

    Input preparation happens before timing starts; a single warm-up sample
    is run first and not counted.
    """
    if not tiles:
        raise EmptyInput("benchmark needs at least one tile")
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    model = model if model.dtype == np.float32 else model.as_inference()
    scenario = default_scenario(model, tiles[0], scenario)
    runners = [_runner(model, tile, scenario, pixel_batch) for tile in tiles]

    if warmup:
        first = prepare_input(tiles[0], scenario, model.input_shape[0])[:1].astype(model.dtype)
        model.predict(first)

    samples: List[float] = []
    for _ in range(repetitions):
        for run in runners:
            started = perf_counter()
            run()
            samples.append(perf_counter() - started)

    result = BenchResult(
        model_name=model.name,
        model_kind=model.kind.value,
        channels=scenario.channel_count,
        tiles=len(tiles),
        repetitions=repetitions,
        mean_seconds=float(np.mean(samples)),
        min_seconds=float(np.min(samples)),
        max_seconds=float(np.max(samples)),
        size=size_report(model),
    )
    logger.info("%s at %d channels: %.4fs per tile (min %.4f, max %.4f) over %d runs",
                result.model_name, result.channels, result.mean_seconds,
                result.min_seconds, result.max_seconds, len(samples))
    return result


def compare_benchmarks(baseline: BenchResult, candidate: BenchResult) -> BenchComparison:
    """How many times faster ``candidate`` is than ``baseline``, and its relative size."""
    def ratio(a: float, b: float) -> float:
        return a / b if b else float("inf")

    return BenchComparison(
        baseline=baseline.model_name,
        candidate=candidate.model_name,
        channels=candidate.channels,
        speedup=ratio(baseline.mean_seconds, candidate.mean_seconds),
        memory_ratio=ratio(candidate.size.bytes_in_memory, baseline.size.bytes_in_memory),
        disk_ratio=ratio(candidate.size.bytes_on_disk, baseline.size.bytes_on_disk),
    )


def save_bench(result: BenchResult, path) -> None:
    try:
        pathlib.Path(path).write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_bench(path) -> BenchResult:
    try:
        return BenchResult.from_dict(json.loads(pathlib.Path(path).read_text()))
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not a benchmark result: {e}") from e
