"""Hypercloud - command line entry point."""

import argparse
import contextlib
import json
import logging
import pathlib
import sys
from typing import Dict, List, Optional, Sequence

from . import __version__
from .common.config import Settings, get_settings
from .common.constants import Constants
from .common.errors import DataError, HypercloudError, IoFailure, LengthMismatch
from .services import run_service
from .services.bandselect_service import (
    BandSelection,
    correlation_clusters,
    load_selection,
    match_wavelengths,
    pca,
    sample_pixels,
    save_selection,
    select_every_second,
    select_per_class_channels,
    select_single_channel,
    standardize,
)
from .services.benchmark_service import benchmark, compare_benchmarks, load_bench, save_bench
from .services.chart_service import ChartService
from .services.database import create_tables, get_engine, get_session_factory, registry_exists
from .services.hypercube_service import (
    ClassMask,
    HyperCube,
    Tile,
    class_distribution,
    load_cube,
    load_mask,
    load_tiles,
    load_wavelength_table,
    rgb_composite,
    save_mask,
    save_tile,
    tile_scene,
    write_ppm,
)
from .services.metrics_service import evaluate
from .services.model_service import ModelKind, load_model, size_report
from .services.pipeline_service import (
    ChannelScenario,
    TrainConfig,
    infer_tiles,
    load_split,
    save_split,
    split_dataset,
    train,
)
from .services.report_service import EvalReport, ReportEntry, load_report, render_report, save_report

logger = logging.getLogger("hypercloud")

USAGE_EXIT_CODE = 2


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _out_dir(path) -> pathlib.Path:
    path = pathlib.Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {path}: {e}") from e
    return path


def _parent_dir(path) -> pathlib.Path:
    path = pathlib.Path(path)
    _out_dir(path.parent)
    return path


def _write_json(data, path) -> None:
    try:
        _parent_dir(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def _require_dir(path) -> pathlib.Path:
    path = pathlib.Path(path)
    if not path.is_dir():
        raise IoFailure(f"{path} is not a directory")
    return path


def _tiles(path, wavelengths=None) -> List[Tile]:
    tiles = load_tiles(_require_dir(path), wavelengths)
    if not tiles:
        raise DataError(f"no .hsc tiles in {path}")
    return tiles


def _masks(path) -> Dict[str, ClassMask]:
    """Every ``.msk`` file in a directory keyed by file stem."""
    return {p.stem: load_mask(p) for p in sorted(_require_dir(path).glob("*.msk"))}


def _wavelengths(path):
    return load_wavelength_table(path) if path else None


def _selection(path, channels: int) -> BandSelection:
    if path:
        return load_selection(path)
    return BandSelection(tuple(range(channels)), channels, mode="all")


def _seed(args, settings: Settings) -> int:
    return settings.seed if args.seed is None else args.seed


def _threads(args, settings: Settings) -> int:
    return settings.threads if args.threads is None else max(1, args.threads)


@contextlib.contextmanager
def _registry(url: Optional[str], create: bool = True):
    """A registry session when ``--registry`` was given, otherwise ``None``.

    With ``create=False`` the registry is only read: a missing SQLite file is an
    ``IoFailure`` and no tables are made.
    """
    if not url:
        yield None
        return
    if not create and not registry_exists(url):
        raise IoFailure(f"no run registry at {url}")
    engine = get_engine(url)
    if create and not create_tables(engine):
        raise IoFailure(f"cannot prepare the run registry at {url}")
    db = get_session_factory(engine)()
    try:
        yield db
    finally:
        db.close()
        engine.dispose()


def _save_figure(fig, path) -> None:
    ChartService.save_figure(fig, _parent_dir(path))
    print(f"📊 Figure written to {path}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_tile(args, settings: Settings) -> int:
    scene = load_cube(args.scene)
    wavelengths = _wavelengths(args.wavelengths)
    if wavelengths is not None:
        scene = HyperCube(scene.data, wavelengths)
    mask = load_mask(args.mask) if args.mask else None
    scene_id = args.scene_id or pathlib.Path(args.scene).stem
    tiles = tile_scene(scene, mask, tile_size=args.tile_size, scene_id=scene_id)
    out_dir = _out_dir(args.out)
    for tile in tiles:
        save_tile(tile, out_dir)
    print(f"✅ {len(tiles)} tiles of {args.tile_size} px written to {out_dir}")
    return 0


def cmd_split(args, settings: Settings) -> int:
    tiles = _tiles(args.tiles)
    plan = split_dataset([t.tile_id for t in tiles], _seed(args, settings), group_by_scene=args.by_scene)
    save_split(plan, _parent_dir(args.out))
    print(f"✅ Split {len(tiles)} tiles: {len(plan.train)} train, {len(plan.val)} val, {len(plan.test)} test")
    return 0


def _per_class_pixels(tiles: Sequence[Tile], per_tile: int, seed: int) -> Dict[int, object]:
    by_class = sample_pixels(tiles, per_tile, seed, by_class=True)
    usable = {}
    for class_id, matrix in by_class.items():
        if len(matrix) < 2:
            logger.warning("Skipping %s: only %d sampled pixels", Constants.CLASS_NAMES[class_id], len(matrix))
            continue
        usable[class_id] = matrix
    return usable


def cmd_select(args, settings: Settings) -> int:
    seed = _seed(args, settings)
    tiles = _tiles(args.tiles)
    channels = tiles[0].cube.channels
    wavelengths = _wavelengths(args.wavelengths)
    if wavelengths is None and tiles[0].cube.wavelengths_nm is not None:
        wavelengths = tiles[0].cube.wavelengths_nm

    pooled = None
    if args.mode == "single":
        pooled = sample_pixels(tiles, args.pixels_per_tile, seed)
        result = pca(standardize(pooled).data)
        selection = select_single_channel(result, wavelengths)
        print(f"📊 PC1 explains {100 * result.explained_variance_ratio[0]:.1f}% of the variance")
    elif args.mode == "perclass":
        selection = select_per_class_channels(
            _per_class_pixels(tiles, args.pixels_per_tile, seed),
            threshold=args.threshold,
            wavelengths=wavelengths,
            threads=_threads(args, settings),
        )
    else:
        selection = select_every_second(channels, limit=args.limit, wavelengths=wavelengths)

    if args.match_wavelengths:
        selection = match_wavelengths(selection, load_wavelength_table(args.match_wavelengths))
    save_selection(selection, _parent_dir(args.out))
    print(f"✅ {selection.mode}: {len(selection)} of {selection.channels} channels -> "
          f"{list(selection.channel_indices)}")

    if args.figure:
        if pooled is None:
            pooled = sample_pixels(tiles, args.pixels_per_tile, seed)
        fig = ChartService.generate_pca_chart(
            pca(standardize(pooled).data), correlation_clusters(pooled, args.threshold), wavelengths
        )
        _save_figure(fig, args.figure)
    return 0


def _split_tiles(tiles: List[Tile], split_path) -> tuple:
    if not split_path:
        return tiles, []
    plan = load_split(split_path)
    by_id = {t.tile_id: t for t in tiles}
    missing = [tile_id for tile_id in plan.train + plan.val if tile_id not in by_id]
    if missing:
        raise DataError(f"split names {len(missing)} tiles that are not in the tile directory, e.g. {missing[0]}")
    return [by_id[i] for i in plan.train], [by_id[i] for i in plan.val]


def cmd_train(args, settings: Settings) -> int:
    tiles = _tiles(args.tiles)
    selection = _selection(args.selection, tiles[0].cube.channels)
    config = TrainConfig(
        scenario=ChannelScenario(selection, ModelKind(args.model)),
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=_seed(args, settings),
        pixels_per_tile=args.pixels_per_tile,
        micro_batch=args.micro_batch,
    )
    train_tiles, val_tiles = _split_tiles(tiles, args.split)
    out_dir = _out_dir(args.out)
    result = train(config, train_tiles, val_tiles, out_dir=out_dir)
    print(f"✅ {result.model.name} trained on {len(train_tiles)} tiles; "
          f"final train loss {result.losses[-1]:.6f}")

    run_name = args.run_name or out_dir.name
    with _registry(args.registry) as db:
        if db is not None:
            run_id = run_service.record_training_run(db, config, result, run_name, out_dir / "model.wgt")
            print(f"📦 Recorded run {run_id} in the registry")

    if args.figure:
        curve = [log.to_dict() for log in result.history]
        _save_figure(ChartService.generate_loss_chart({run_name: curve}), args.figure)
    return 0


def cmd_infer(args, settings: Settings) -> int:
    model = load_model(args.model)
    tiles = _tiles(args.tiles)
    scenario = ChannelScenario(load_selection(args.selection), model.kind) if args.selection else None
    masks = infer_tiles(model, tiles, scenario, threads=_threads(args, settings), pixel_batch=args.pixel_batch)
    out_dir = _out_dir(args.out)
    for tile, mask in zip(tiles, masks):
        save_mask(mask, out_dir / f"{tile.tile_id}.msk")
    print(f"✅ {len(masks)} masks written to {out_dir}")
    return 0


def cmd_eval(args, settings: Settings) -> int:
    truths = _masks(args.truth)
    preds = _masks(args.pred)
    if not truths:
        raise DataError(f"no .msk files in {args.truth}")
    missing = sorted(set(truths) - set(preds))
    if missing:
        raise LengthMismatch(f"{len(missing)} truth masks have no prediction, e.g. {missing[0]}")
    names = sorted(truths)
    seg, cls = evaluate([preds[n] for n in names], [truths[n] for n in names], args.threshold)
    entry = ReportEntry(args.model_name, args.scenario, args.split, seg, cls, tiles=len(names))

    report = load_report(args.report) if pathlib.Path(args.report).exists() else EvalReport()
    save_report(report.with_entry(entry), _parent_dir(args.report))
    print(f"✅ {args.model_name} ({args.scenario} ch, {args.split}): PA {100 * seg.pixel_accuracy:.2f}%, "
          f"tile accuracy {100 * cls.accuracy:.2f}%, F1 {100 * cls.f1:.2f}% over {len(names)} tiles")

    with _registry(args.registry) as db:
        if db is not None:
            run_service.record_evaluation(db, entry, run_id=args.run_id)
    return 0


def cmd_bench(args, settings: Settings) -> int:
    model = load_model(args.model)
    tiles = _tiles(args.tiles)
    scenario = ChannelScenario(load_selection(args.selection), model.kind) if args.selection else None
    result = benchmark(model, tiles, scenario, repetitions=args.repetitions, pixel_batch=args.pixel_batch)
    save_bench(result, _parent_dir(args.out))
    print(f"✅ {result.model_name} at {result.channels} channels: {result.mean_seconds:.4f}s per tile "
          f"({result.size.parameter_count} parameters, {result.size.bytes_on_disk} bytes on disk)")

    others = [load_bench(path) for path in args.compare]
    for other in others:
        slow, fast = (other, result) if other.mean_seconds >= result.mean_seconds else (result, other)
        cmp = compare_benchmarks(slow, fast)
        print(f"   {cmp.candidate} is {cmp.speedup:.1f}x faster than {cmp.baseline}")

    with _registry(args.registry) as db:
        if db is not None:
            run_service.record_benchmark(db, result, run_id=args.run_id)

    if args.figure:
        _save_figure(ChartService.generate_benchmark_chart([result] + others), args.figure)
    return 0


def cmd_composite(args, settings: Settings) -> int:
    cube = load_cube(args.cube)
    image = rgb_composite(cube, *args.bands, aux_bands=tuple(args.aux_bands), aux_fraction=args.aux_fraction)
    write_ppm(image, _parent_dir(args.out))
    print(f"✅ Composite {image.shape[1]}x{image.shape[0]} written to {args.out}")
    return 0


def cmd_stats(args, settings: Settings) -> int:
    masks = _masks(args.masks)
    stats = class_distribution(list(masks.values()), bins=args.bins)
    if args.out:
        _write_json(stats.to_dict(), args.out)
    shares = ", ".join(f"{name} {100 * f:.1f}%" for name, f in zip(Constants.CLASS_NAMES, stats.class_fractions))
    print(f"✅ {stats.tile_count} tiles: {shares}")
    if args.figure:
        _save_figure(ChartService.generate_class_distribution_chart(stats), args.figure)
    return 0


def cmd_report(args, settings: Settings) -> int:
    report = load_report(args.report).with_benchmarks(load_bench(p) for p in args.bench)
    text = render_report(report)
    if args.out:
        try:
            _parent_dir(args.out).write_text(text)
        except OSError as e:
            raise IoFailure(f"cannot write {args.out}: {e}") from e
    else:
        sys.stdout.write(text)
    if args.figure and report.benchmarks:
        _save_figure(ChartService.generate_benchmark_chart(report.benchmarks), args.figure)
    return 0


def cmd_size(args, settings: Settings) -> int:
    report = size_report(load_model(args.model))
    if args.out:
        _write_json(report.to_dict(), args.out)
    print(f"✅ {report.parameter_count} parameters, {report.bytes_in_memory} bytes in memory, "
          f"{report.bytes_on_disk} bytes on disk, {report.macs} MACs per forward pass")
    return 0


def cmd_history(args, settings: Settings) -> int:
    with _registry(args.registry or settings.database_url, create=False) as db:
        stats = run_service.get_registry_statistics(db)
        runs = run_service.get_run_history(db, limit=args.limit)
        curve = run_service.get_training_curve(db, args.run) if args.run is not None else []
    print(f"📦 {stats['total_runs']} runs, {stats['total_evaluations']} evaluations, "
          f"{stats['total_benchmarks']} benchmarks")
    for run in runs:
        loss = run["final_train_loss"]
        print(f"   #{run['id']} {run['run_name']}: {run['model_name']} at {run['channels']} ch, "
              f"{run['epochs']} epochs, loss {'n/a' if loss is None else f'{loss:.6f}'}")
    if args.figure and curve:
        _save_figure(ChartService.generate_loss_chart({f"run {args.run}": curve}), args.figure)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_seed(parser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help="random seed (falls back to HYPERCLOUD_SEED, then 0)")


def _add_threads(parser) -> None:
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (falls back to HYPERCLOUD_THREADS, then the core count)")


def _add_registry(parser) -> None:
    parser.add_argument("--registry", default=None, help="SQLAlchemy URL of the run registry to record into")
    parser.add_argument("--run-id", type=int, default=None, help="registry run this record belongs to")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="hypercloud",
        description="Cloud segmentation of hyperspectral tiles with compact 1D and 2D networks.",
        formatter_class=fmt,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="logging level (falls back to HYPERCLOUD_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("tile", help="cut a scene cube (and mask) into tiles", formatter_class=fmt)
    p.add_argument("scene", help="scene .hsc file")
    p.add_argument("--mask", default=None, help="scene .msk file")
    p.add_argument("--out", required=True, help="output tile directory")
    p.add_argument("--tile-size", type=int, default=Constants.TILE_SIZE, help="tile edge in pixels")
    p.add_argument("--scene-id", default=None, help="tile name prefix (defaults to the scene file stem)")
    p.add_argument("--wavelengths", default=None, help="index,wavelength_nm table of the scene")
    p.set_defaults(handler=cmd_tile)

    p = sub.add_parser("split", help="seeded train/val/test split of a tile directory", formatter_class=fmt)
    p.add_argument("tiles", help="tile directory")
    p.add_argument("--out", required=True, help="split plan JSON")
    p.add_argument("--by-scene", action="store_true", help="keep all tiles of a scene in one subset")
    _add_seed(p)
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("select", help="choose the channels a model will see", formatter_class=fmt)
    p.add_argument("tiles", help="tile directory")
    p.add_argument("--mode", choices=("single", "perclass", "every2nd"), default="perclass", help="selection rule")
    p.add_argument("--threshold", type=float, default=Constants.CLUSTER_THRESHOLD,
                   help="correlation threshold for channel clusters")
    p.add_argument("--limit", type=int, default=Constants.EVERY_SECOND_LIMIT,
                   help="maximum channels kept by every2nd")
    p.add_argument("--pixels-per-tile", type=int, default=Constants.PIXELS_PER_TILE,
                   help="pixels sampled per tile for PCA")
    p.add_argument("--wavelengths", default=None, help="index,wavelength_nm table of the tiles")
    p.add_argument("--match-wavelengths", default=None,
                   help="wavelength table of another sensor to carry the selection over to")
    p.add_argument("--out", required=True, help="band selection JSON")
    p.add_argument("--figure", default=None, help="write the PCA / correlation figure as HTML")
    _add_seed(p)
    _add_threads(p)
    p.set_defaults(handler=cmd_select)

    p = sub.add_parser("train", help="train a model on labelled tiles", formatter_class=fmt)
    p.add_argument("tiles", help="tile directory with masks")
    p.add_argument("--model", choices=[k.value for k in ModelKind], default=ModelKind.LIUNET_1D.value,
                   help="network to train")
    p.add_argument("--selection", default=None, help="band selection JSON (all channels when omitted)")
    p.add_argument("--split", default=None, help="split plan JSON (all tiles train when omitted)")
    p.add_argument("--out", required=True, help="model output directory")
    p.add_argument("--epochs", type=int, default=Constants.EPOCHS, help="passes over the training set")
    p.add_argument("--batch-size", type=int, default=Constants.BATCH_SIZE, help="samples per Adam step")
    p.add_argument("--lr", type=float, default=Constants.LEARNING_RATE, help="Adam learning rate")
    p.add_argument("--pixels-per-tile", type=int, default=None, help="1D only: pixels drawn per tile")
    p.add_argument("--micro-batch", type=int, default=None, help="samples per forward pass within a batch")
    p.add_argument("--run-name", default=None, help="registry run name (defaults to the output directory name)")
    p.add_argument("--registry", default=None, help="SQLAlchemy URL of the run registry to record into")
    p.add_argument("--figure", default=None, help="write the loss curve as HTML")
    _add_seed(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("infer", help="segment tiles with a saved model", formatter_class=fmt)
    p.add_argument("model", help="model directory")
    p.add_argument("tiles", help="tile directory")
    p.add_argument("--selection", default=None, help="band selection JSON the model was trained with")
    p.add_argument("--out", required=True, help="mask output directory")
    p.add_argument("--pixel-batch", type=int, default=Constants.EVAL_CHUNK_1D,
                   help="1D only: pixels per forward pass")
    _add_threads(p)
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("eval", help="score predicted masks against ground truth", formatter_class=fmt)
    p.add_argument("pred", help="directory of predicted .msk files")
    p.add_argument("truth", help="directory of ground-truth .msk files")
    p.add_argument("--model-name", required=True, help="row label in the report")
    p.add_argument("--scenario", type=int, required=True, help="channel count of the scenario")
    p.add_argument("--split", default="test", help="subset name (val, test, ...)")
    p.add_argument("--threshold", type=float, default=Constants.CLOUDY_THRESHOLD,
                   help="cloud coverage above which a tile is cloudy")
    p.add_argument("--report", required=True, help="evaluation report JSON, updated in place")
    _add_registry(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("bench", help="time inference and report model size", formatter_class=fmt)
    p.add_argument("model", help="model directory")
    p.add_argument("tiles", help="tile directory")
    p.add_argument("--selection", default=None, help="band selection JSON the model was trained with")
    p.add_argument("--repetitions", type=int, default=1, help="timed passes over the tiles")
    p.add_argument("--pixel-batch", type=int, default=1, help="1D only: pixels per forward pass")
    p.add_argument("--out", required=True, help="benchmark result JSON")
    p.add_argument("--compare", nargs="*", default=[], help="other benchmark results to compare against")
    p.add_argument("--figure", default=None, help="write the benchmark figure as HTML")
    _add_registry(p)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("composite", help="render an RGB composite of a cube", formatter_class=fmt)
    p.add_argument("cube", help=".hsc file")
    p.add_argument("--out", required=True, help="output .ppm file")
    p.add_argument("--bands", type=int, nargs=3, default=list(Constants.COMPOSITE_BANDS),
                   metavar=("R", "G", "B"), help="red, green and blue band indices")
    p.add_argument("--aux-bands", type=int, nargs=2, default=list(Constants.COMPOSITE_AUX_BANDS),
                   help="bands averaged into every colour channel")
    p.add_argument("--aux-fraction", type=float, default=Constants.COMPOSITE_AUX_FRACTION,
                   help="weight of the auxiliary band mean")
    p.set_defaults(handler=cmd_composite)

    p = sub.add_parser("stats", help="class balance and cloud coverage of a mask set", formatter_class=fmt)
    p.add_argument("masks", help="directory of .msk files")
    p.add_argument("--bins", type=int, default=Constants.COVERAGE_BINS, help="cloud coverage histogram bins")
    p.add_argument("--out", default=None, help="statistics JSON")
    p.add_argument("--figure", default=None, help="write the coverage histogram as HTML")
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("report", help="render an evaluation report as text", formatter_class=fmt)
    p.add_argument("report", help="evaluation report JSON")
    p.add_argument("--bench", nargs="*", default=[], help="benchmark results to append")
    p.add_argument("--out", default=None, help="text output (stdout when omitted)")
    p.add_argument("--figure", default=None, help="write the benchmark figure as HTML")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("size", help="parameter count, memory and MACs of a saved model", formatter_class=fmt)
    p.add_argument("model", help="model directory")
    p.add_argument("--out", default=None, help="size report JSON")
    p.set_defaults(handler=cmd_size)

    p = sub.add_parser("history", help="list runs stored in the registry", formatter_class=fmt)
    p.add_argument("--registry", default=None, help="SQLAlchemy URL (falls back to DATABASE_URL)")
    p.add_argument("--limit", type=int, default=20, help="most recent runs to list")
    p.add_argument("--run", type=int, default=None, help="run id whose loss curve to plot")
    p.add_argument("--figure", default=None, help="write the loss curve of --run as HTML")
    p.set_defaults(handler=cmd_history)
    return parser


def _error_line(code: int, error: Exception) -> str:
    return f"error code={code} kind={type(error).__name__} message={json.dumps(str(error))}"


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else USAGE_EXIT_CODE

    try:
        settings = get_settings()
        logging.basicConfig(
            level=(args.log_level or settings.log_level).upper(),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        return args.handler(args, settings)
    except (HypercloudError, ValueError) as e:
        code = e.exit_code if isinstance(e, HypercloudError) else USAGE_EXIT_CODE
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(_error_line(code, e), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
