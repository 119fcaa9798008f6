"""Experiment orchestration: splits, channel scenarios, training and tile inference."""

import json
import logging
import math
import pathlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..common.constants import Constants
from ..common.errors import (
    ChannelMissing,
    DataError,
    IoFailure,
    NonFiniteLoss,
    ShapeMismatch,
    TooFewTiles,
    malformed,
)
from ..nn.graph import backward
from ..nn.layers import cross_entropy, cross_entropy_logits_grad
from ..nn.optim import Adam
from .bandselect_service import BandSelection, replicate_channels
from .hypercube_service import ClassMask, Tile, parse_tile_id
from .model_service import ModelGraph, ModelKind, build_model, replication_factor, save_model

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Dataset split
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    seed: int
    train: Tuple[str, ...]
    val: Tuple[str, ...]
    test: Tuple[str, ...]
    group_by_scene: bool = False

    def subset(self, name: str) -> Tuple[str, ...]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {
            "schema": Constants.SPLIT_PLAN_SCHEMA,
            "seed": self.seed,
            "group_by_scene": self.group_by_scene,
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SplitPlan":
        with malformed("split plan"):
            if data.get("schema") != Constants.SPLIT_PLAN_SCHEMA:
                raise DataError(f"unsupported split plan schema {data.get('schema')!r}")
            return cls(
                seed=int(data["seed"]),
                train=tuple(data["train"]),
                val=tuple(data["val"]),
                test=tuple(data["test"]),
                group_by_scene=bool(data.get("group_by_scene", False)),
            )


def _split_sizes(n: int) -> Tuple[int, int]:
    train = math.floor(Fraction(str(Constants.TRAIN_FRACTION)) * n)
    val = math.floor(Fraction(str(Constants.VAL_FRACTION)) * n)
    return train, val


def split_dataset(tile_ids: Sequence[str], seed: int, group_by_scene: bool = False) -> SplitPlan:
    """Seeded 70/20/10 split of tile ids.

    Tile-level by default. With ``group_by_scene`` whole scenes are assigned
    in shuffled order to train, then val, until each reaches its target; the
    rest go to test.
    """
    ids = list(tile_ids)
    n = len(ids)
    if n < Constants.MIN_SPLIT_TILES:
        raise TooFewTiles(f"need at least {Constants.MIN_SPLIT_TILES} tiles to split, got {n}")
    if len(set(ids)) != n:
        raise DataError("tile ids must be unique")
    n_train, n_val = _split_sizes(n)
    rng = np.random.default_rng(seed)

    if not group_by_scene:
        shuffled = [ids[i] for i in rng.permutation(n)]
        return SplitPlan(
            seed=seed,
            train=tuple(shuffled[:n_train]),
            val=tuple(shuffled[n_train:n_train + n_val]),
            test=tuple(shuffled[n_train + n_val:]),
        )

    scenes: Dict[str, List[str]] = {}
    for tile_id in ids:
        scenes.setdefault(parse_tile_id(tile_id)[0], []).append(tile_id)
    names = sorted(scenes)
    train, val, test = [], [], []
    for index in rng.permutation(len(names)):
        members = sorted(scenes[names[index]])
        if len(train) < n_train:
            train += members
        elif len(val) < n_val:
            val += members
        else:
            test += members
    return SplitPlan(seed, tuple(train), tuple(val), tuple(test), group_by_scene=True)


def save_split(plan: SplitPlan, path) -> None:
    try:
        pathlib.Path(path).write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_split(path) -> SplitPlan:
    try:
        return SplitPlan.from_dict(json.loads(pathlib.Path(path).read_text()))
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not a split plan: {e}") from e


# ---------------------------------------------------------------------------
# Channel scenarios and model inputs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelScenario:
    """A band selection paired with the network that consumes it."""
    selection: BandSelection
    model_kind: ModelKind = ModelKind.LIUNET_1D

    @property
    def channel_count(self) -> int:
        return len(self.selection)

    @property
    def repeats(self) -> int:
        if self.model_kind != ModelKind.LIUNET_1D:
            return 1
        return replication_factor(self.channel_count)

    @property
    def input_channels(self) -> int:
        """Spectrum length for the 1D network, channel count for the 2D one."""
        return self.channel_count * self.repeats


def _select_channels(data: np.ndarray, selection: BandSelection) -> np.ndarray:
    indices = list(selection.channel_indices)
    if indices[-1] >= data.shape[-1]:
        raise ChannelMissing(
            f"selection needs channel {indices[-1]} but the data has {data.shape[-1]} channels"
        )
    return data[..., indices]


def prepare_spectra(spectra: np.ndarray, scenario: ChannelScenario) -> np.ndarray:
    """(P, C) pixel spectra -> (P, L, 1) inputs of the 1D network."""
    picked = _select_channels(np.asarray(spectra), scenario.selection)
    return replicate_channels(picked, scenario.repeats)[..., None]


def crop_offsets(tile_size: int, crop_size: int) -> List[Tuple[int, int]]:
    """Top-left corners of the crops covering a tile: both ends of each axis."""
    if tile_size < crop_size:
        raise ShapeMismatch(f"tile of {tile_size} px is smaller than the {crop_size} px crop")
    starts = sorted({0, tile_size - crop_size})
    return [(row, col) for row in starts for col in starts]


def prepare_input(tile: Tile, scenario: ChannelScenario, crop_size: int = Constants.CROP_SIZE) -> np.ndarray:
    """Model-ready batch for one tile.

    1D: one replicated spectrum per pixel, row-major, shape (H*W, L, 1).
    2D: the selected channels cut into overlapping crops, shape (n, S, S, K)
    in ``crop_offsets`` order.
    """
    if scenario.model_kind == ModelKind.LIUNET_1D:
        return prepare_spectra(tile.cube.pixels(), scenario)
    selected = _select_channels(tile.cube.data, scenario.selection)
    crops = [
        selected[row:row + crop_size, col:col + crop_size]
        for row, col in crop_offsets(tile.size, crop_size)
    ]
    return np.stack(crops)


def _crop_labels(mask: ClassMask, crop_size: int) -> np.ndarray:
    return np.stack([
        mask.labels[row:row + crop_size, col:col + crop_size]
        for row, col in crop_offsets(mask.height, crop_size)
    ])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    scenario: ChannelScenario
    epochs: int = Constants.EPOCHS
    batch_size: int = Constants.BATCH_SIZE
    learning_rate: float = Constants.LEARNING_RATE
    seed: int = 0
    # 1D only: pixels drawn per tile (all when None)
    pixels_per_tile: Optional[int] = None
    # samples per recorded forward pass; gradients are summed in batch order
    micro_batch: Optional[int] = None
    crop_size: int = Constants.CROP_SIZE

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.micro_batch is not None and self.micro_batch < 1:
            raise ValueError("micro_batch must be at least 1")

    @property
    def model_kind(self) -> ModelKind:
        return self.scenario.model_kind


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: Optional[float]
    seconds: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "val_loss": self.val_loss, "seconds": self.seconds}


@dataclass
class TrainResult:
    model: ModelGraph
    history: List[EpochLog] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [log.train_loss for log in self.history]


def _require_masks(tiles: Sequence[Tile]) -> None:
    for tile in tiles:
        if tile.mask is None:
            raise DataError(f"tile {tile.tile_id} has no mask to train or validate against")


def build_samples(tiles: Sequence[Tile], config: TrainConfig, rng: Optional[np.random.Generator] = None):
    """Stack training samples and labels for every tile, in tile order.

    Inputs stay float32 here; batches are promoted when they are used.
    """
    _require_masks(tiles)
    inputs, labels = [], []
    for tile in tiles:
        if config.model_kind == ModelKind.LIUNET_1D:
            spectra = tile.cube.pixels()
            truth = tile.mask.labels.ravel()
            if config.pixels_per_tile is not None and rng is not None and config.pixels_per_tile < len(spectra):
                index = np.sort(rng.choice(len(spectra), size=config.pixels_per_tile, replace=False))
                spectra, truth = spectra[index], truth[index]
            inputs.append(prepare_spectra(spectra, config.scenario))
            labels.append(truth)
        else:
            inputs.append(prepare_input(tile, config.scenario, config.crop_size))
            labels.append(_crop_labels(tile.mask, config.crop_size))
    if not inputs:
        return None, None
    return np.concatenate(inputs), np.concatenate(labels).astype(np.intp)


def _batch_gradients(model: ModelGraph, x: np.ndarray, y: np.ndarray, micro: int):
    """Mean loss and summed parameter gradients over one batch, in fixed micro-batch order."""
    total_loss = 0.0
    grads: Dict[str, Dict[str, np.ndarray]] = {}
    count = len(x)
    for start in range(0, count, micro):
        xb = x[start:start + micro].astype(np.float64)
        yb = y[start:start + micro]
        probs, tape = model.forward(xb, record=True)
        share = len(xb) / count
        total_loss += cross_entropy(probs, yb) * share
        chunk = backward(tape, cross_entropy_logits_grad(probs, yb) * share, through_softmax=False)
        for layer, layer_grads in chunk.items():
            target = grads.setdefault(layer, {})
            for name, grad in layer_grads.items():
                target[name] = target[name] + grad if name in target else grad
    return total_loss, grads


def evaluate_loss(model: ModelGraph, x: np.ndarray, y: np.ndarray, chunk: int) -> float:
    total = 0.0
    for start in range(0, len(x), chunk):
        xb = x[start:start + chunk].astype(model.dtype)
        probs = model.predict(xb)
        total += cross_entropy(probs, y[start:start + chunk]) * len(xb)
    return total / len(x)


def train(
    config: TrainConfig,
    train_tiles: Sequence[Tile],
    val_tiles: Sequence[Tile] = (),
    out_dir=None,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
) -> TrainResult:
    """Mini-batch Adam on mean cross-entropy; the model is saved to ``out_dir`` when given."""
    if not train_tiles:
        raise TooFewTiles("no training tiles")
    rng = np.random.default_rng([config.seed, 1])
    x_train, y_train = build_samples(train_tiles, config, rng)
    x_val, y_val = build_samples(val_tiles, config, rng) if val_tiles else (None, None)

    model = build_model(config.model_kind, config.scenario.input_channels,
                        seed=config.seed, tile_size=config.crop_size).as_training()
    optimizer = Adam(learning_rate=config.learning_rate)
    if config.micro_batch is not None:
        micro = config.micro_batch
    elif config.model_kind == ModelKind.UNET_2D:
        micro = Constants.MICRO_BATCH_2D
    else:
        micro = config.batch_size
    eval_chunk = Constants.EVAL_CHUNK_1D if config.model_kind == ModelKind.LIUNET_1D else micro

    logger.info("Training %s on %d samples (%d channels, %d epochs, batch %d)",
                model.name, len(x_train), config.scenario.channel_count, config.epochs, config.batch_size)
    result = TrainResult(model=model)
    n = len(x_train)
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(n)
        epoch_loss = 0.0
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            index = np.sort(order[start:start + config.batch_size])
            loss, grads = _batch_gradients(model, x_train[index], y_train[index], micro)
            if not math.isfinite(loss):
                raise NonFiniteLoss(
                    f"loss became {loss} at epoch {epoch}, batch {batch_index} "
                    f"(learning rate {config.learning_rate}, {optimizer.steps} steps taken)"
                )
            optimizer.step(model.layers, grads)
            epoch_loss += loss * len(index)
        train_loss = epoch_loss / n
        val_loss = evaluate_loss(model, x_val, y_val, eval_chunk) if x_val is not None else None
        log = EpochLog(epoch, train_loss, val_loss, time.perf_counter() - started)
        result.history.append(log)
        logger.info("Epoch %d/%d: train loss %.6f, val loss %s (%.1fs)", epoch, config.epochs,
                    train_loss, "n/a" if val_loss is None else f"{val_loss:.6f}", log.seconds)
        if on_epoch is not None:
            on_epoch(log)

    if out_dir is not None:
        save_model(model, out_dir)
        history_path = pathlib.Path(out_dir) / "history.json"
        try:
            history_path.write_text(json.dumps([log.to_dict() for log in result.history], indent=2) + "\n")
        except OSError as e:
            raise IoFailure(f"cannot write {history_path}: {e}") from e
    return result


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _check_model(model: ModelGraph, kind: ModelKind) -> None:
    if model.kind != kind:
        raise ShapeMismatch(f"{model.name} is not a {kind.value} model")


def default_scenario(model: ModelGraph, tile: Tile, scenario: Optional[ChannelScenario]) -> ChannelScenario:
    if scenario is not None:
        return scenario
    # no selection: the tile's own channels in order
    channels = tile.cube.channels
    return ChannelScenario(BandSelection(tuple(range(channels)), channels, mode="all"), model.kind)


def stitch_crops(model: ModelGraph, crops: np.ndarray, offsets: Sequence[Tuple[int, int]],
                 tile_size: int) -> np.ndarray:
    """Average the class probabilities of overlapping crops over the full tile."""
    probs = model.predict(crops.astype(model.dtype, copy=False))
    crop = crops.shape[1]
    total = np.zeros((tile_size, tile_size, probs.shape[-1]), dtype=np.float64)
    cover = np.zeros((tile_size, tile_size, 1), dtype=np.float64)
    for (row, col), crop_probs in zip(offsets, probs):
        total[row:row + crop, col:col + crop] += crop_probs
        cover[row:row + crop, col:col + crop] += 1.0
    return total / cover


def infer_tile_2d(model: ModelGraph, tile: Tile,
                  scenario: Optional[ChannelScenario] = None) -> Tuple[ClassMask, np.ndarray]:
    """Segment a tile from its overlapping crops; ties go to the lowest class id."""
    _check_model(model, ModelKind.UNET_2D)
    scenario = default_scenario(model, tile, scenario)
    crop = model.input_shape[0]
    crops = prepare_input(tile, scenario, crop)
    if crops.shape[-1] != model.input_shape[-1]:
        raise ShapeMismatch(f"{model.name} expects {model.input_shape[-1]} channels, got {crops.shape[-1]}")
    probs = stitch_crops(model, crops, crop_offsets(tile.size, crop), tile.size)
    return ClassMask(np.argmax(probs, axis=-1).astype(np.uint8)), probs


def classify_spectra(model: ModelGraph, spectra: np.ndarray, pixel_batch: int = 1) -> np.ndarray:
    """Class id per prepared spectrum; ``pixel_batch=1`` runs one forward pass per pixel."""
    spectra = spectra.astype(model.dtype, copy=False)
    labels = np.empty(len(spectra), dtype=np.uint8)
    for start in range(0, len(spectra), pixel_batch):
        probs = model.predict(spectra[start:start + pixel_batch])
        labels[start:start + pixel_batch] = np.argmax(probs, axis=-1)
    return labels


def infer_tile_1d(model: ModelGraph, tile: Tile, scenario: Optional[ChannelScenario] = None,
                  pixel_batch: int = 1) -> ClassMask:
    """Per-pixel spectral classification with no spatial context."""
    _check_model(model, ModelKind.LIUNET_1D)
    scenario = default_scenario(model, tile, scenario)
    spectra = prepare_input(tile, scenario)
    if spectra.shape[1:] != tuple(model.input_shape):
        raise ShapeMismatch(
            f"{model.name} expects spectra of length {model.input_shape[0]}, got {spectra.shape[1]}"
        )
    labels = classify_spectra(model, spectra, pixel_batch)
    return ClassMask(labels.reshape(tile.cube.height, tile.cube.width))


def infer_tile(model: ModelGraph, tile: Tile, scenario: Optional[ChannelScenario] = None,
               pixel_batch: int = 1) -> ClassMask:
    if model.kind == ModelKind.UNET_2D:
        return infer_tile_2d(model, tile, scenario)[0]
    return infer_tile_1d(model, tile, scenario, pixel_batch)


def infer_tiles(model: ModelGraph, tiles: Sequence[Tile], scenario: Optional[ChannelScenario] = None,
                threads: int = 1, pixel_batch: int = 1) -> List[ClassMask]:
    """Masks for every tile, in input order, from a shared read-only model."""
    model = model if model.dtype == np.float32 else model.as_inference()
    if threads <= 1 or len(tiles) <= 1:
        return [infer_tile(model, tile, scenario, pixel_batch) for tile in tiles]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda tile: infer_tile(model, tile, scenario, pixel_batch), tiles))
