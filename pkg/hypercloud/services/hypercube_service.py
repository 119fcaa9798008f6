"""Hyperspectral cube and cloud mask data model, file formats, tiling and composites."""

import logging
import pathlib
import re
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from ..common.constants import Constants
from ..common.errors import (
    BadMagic,
    BandOutOfRange,
    DimMismatch,
    EmptyCube,
    EmptyInput,
    InvalidLabel,
    InvalidWavelengths,
    IoFailure,
    NonFinite,
    TileTooLarge,
    UnsupportedDtype,
)

logger = logging.getLogger(__name__)

# magic, version u16, H, W, C u32, dtype u8
_CUBE_HEADER = struct.Struct("<4sHIIIB")
# magic, H, W u32
_MASK_HEADER = struct.Struct("<4sII")
_TILE_NAME = re.compile(r"^(?P<scene>.+)_r(?P<row>\d+)_c(?P<col>\d+)$")


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class HyperCube:
    """An (H, W, C) radiance cube stored band-interleaved-by-pixel."""
    data: np.ndarray
    wavelengths_nm: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3:
            raise DimMismatch(f"cube data must be 3-D (H, W, C), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFinite("cube contains NaN or infinite values")
        object.__setattr__(self, "data", _frozen(data))

        if self.wavelengths_nm is not None:
            wavelengths = np.array(self.wavelengths_nm, dtype=np.float64, copy=True)
            if wavelengths.shape != (data.shape[2],):
                raise InvalidWavelengths(
                    f"{wavelengths.size} wavelengths given for {data.shape[2]} channels"
                )
            if np.any(np.diff(wavelengths) <= 0):
                raise InvalidWavelengths("wavelengths must be strictly increasing")
            object.__setattr__(self, "wavelengths_nm", _frozen(wavelengths))

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])

    def spectrum(self, row: int, col: int) -> np.ndarray:
        return self.data[row, col]

    def pixels(self) -> np.ndarray:
        """All spectra as an (H*W, C) matrix in row-major pixel order."""
        return self.data.reshape(-1, self.channels)


@dataclass(frozen=True)
class ClassMask:
    """Per-pixel class ids: 0 = No Cloud, 1 = Thin Cloud, 2 = Thick Cloud."""
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise DimMismatch(f"mask labels must be 2-D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= Constants.NUM_CLASSES):
            raise InvalidLabel(f"mask labels must lie in 0..{Constants.NUM_CLASSES - 1}")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8, copy=True)))

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    def cloud_fraction(self) -> float:
        if self.labels.size == 0:
            return 0.0
        return float(np.count_nonzero(self.labels > 0)) / self.labels.size


@dataclass(frozen=True)
class Tile:
    cube: HyperCube
    mask: Optional[ClassMask] = None
    origin: Tuple[int, int] = (0, 0)
    scene_id: str = "scene"

    def __post_init__(self):
        if self.cube.height != self.cube.width:
            raise DimMismatch(f"tile must be square, got {self.cube.height}x{self.cube.width}")
        if self.mask is not None and (self.mask.height, self.mask.width) != (self.cube.height, self.cube.width):
            raise DimMismatch("tile mask does not match tile cube size")

    @property
    def size(self) -> int:
        return self.cube.height

    @property
    def tile_id(self) -> str:
        return f"{self.scene_id}_r{self.origin[0]:05d}_c{self.origin[1]:05d}"


@dataclass(frozen=True)
class DatasetStats:
    tile_count: int
    class_fractions: Tuple[float, float, float]
    coverage_histogram: Tuple[int, ...]
    bin_edges: Tuple[float, ...]
    # class fractions of the tiles falling in each coverage bin (zeros for empty bins)
    bin_class_fractions: Tuple[Tuple[float, float, float], ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "tile_count": self.tile_count,
            "class_fractions": list(self.class_fractions),
            "coverage_histogram": list(self.coverage_histogram),
            "bin_edges": list(self.bin_edges),
            "bin_class_fractions": [list(row) for row in self.bin_class_fractions],
        }


# ---------------------------------------------------------------------------
# Cube and mask files
# ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    try:
        return pathlib.Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e


def _write_bytes(path, payload: bytes) -> None:
    try:
        pathlib.Path(path).write_bytes(payload)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_cube(path) -> HyperCube:
    raw = _read_bytes(path)
    if len(raw) < _CUBE_HEADER.size or raw[:4] != Constants.CUBE_MAGIC:
        raise BadMagic(f"{path} is not a cube file")
    _, _version, height, width, channels, dtype_code = _CUBE_HEADER.unpack_from(raw)
    if dtype_code != Constants.CUBE_DTYPE_FLOAT32:
        raise UnsupportedDtype(f"{path}: dtype code {dtype_code} is not supported")

    payload = raw[_CUBE_HEADER.size:]
    expected = height * width * channels * 4
    if len(payload) != expected:
        raise DimMismatch(
            f"{path}: header says {height}x{width}x{channels} ({expected} bytes), "
            f"payload has {len(payload)} bytes"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(height, width, channels)
    return HyperCube(data=data)


def save_cube(cube: HyperCube, path) -> None:
    if cube.height == 0 or cube.width == 0 or cube.channels == 0:
        raise EmptyCube("refusing to write a cube with a zero dimension")
    header = _CUBE_HEADER.pack(
        Constants.CUBE_MAGIC,
        Constants.CUBE_VERSION,
        cube.height,
        cube.width,
        cube.channels,
        Constants.CUBE_DTYPE_FLOAT32,
    )
    _write_bytes(path, header + cube.data.astype("<f4").tobytes())


def load_mask(path) -> ClassMask:
    raw = _read_bytes(path)
    if len(raw) < _MASK_HEADER.size or raw[:4] != Constants.MASK_MAGIC:
        raise BadMagic(f"{path} is not a mask file")
    _, height, width = _MASK_HEADER.unpack_from(raw)
    payload = raw[_MASK_HEADER.size:]
    if len(payload) != height * width:
        raise DimMismatch(f"{path}: expected {height * width} label bytes, got {len(payload)}")
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return ClassMask(labels=labels)


def save_mask(mask: ClassMask, path) -> None:
    header = _MASK_HEADER.pack(Constants.MASK_MAGIC, mask.height, mask.width)
    _write_bytes(path, header + mask.labels.tobytes())


def load_wavelength_table(path) -> np.ndarray:
    """Read an ``index,wavelength_nm`` table; a non-numeric first row is a header."""
    try:
        lines = pathlib.Path(path).read_text().splitlines()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e

    rows = []
    header_seen = False
    for number, line in enumerate(lines):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [part.strip() for part in line.split(",")]
        try:
            rows.append((int(parts[0]), float(parts[1])))
        except (ValueError, IndexError):
            if rows or header_seen:
                raise InvalidWavelengths(f"{path}:{number + 1}: cannot parse {line!r}") from None
            header_seen = True
    if not rows:
        raise InvalidWavelengths(f"{path} holds no wavelengths")

    indices = [index for index, _ in rows]
    if indices != list(range(len(rows))):
        raise InvalidWavelengths(f"{path}: channel indices must run 0..{len(rows) - 1}")
    wavelengths = np.array([value for _, value in rows], dtype=np.float64)
    if np.any(np.diff(wavelengths) <= 0):
        raise InvalidWavelengths(f"{path}: wavelengths must be strictly increasing")
    return wavelengths


def save_wavelength_table(wavelengths: Sequence[float], path) -> None:
    lines = ["index,wavelength_nm"]
    lines += [f"{i},{float(w)!r}" for i, w in enumerate(wavelengths)]
    _write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# Tiling
# ---------------------------------------------------------------------------

def tile_scene(
    scene: HyperCube,
    mask: Optional[ClassMask] = None,
    tile_size: int = Constants.TILE_SIZE,
    scene_id: str = "scene",
) -> List[Tile]:
    """Cut a scene into a non-overlapping grid of square tiles; leftovers are dropped."""
    if tile_size < 1 or scene.width < tile_size:
        raise TileTooLarge(f"tile size {tile_size} does not fit scene width {scene.width}")
    if mask is not None and (mask.height, mask.width) != (scene.height, scene.width):
        raise DimMismatch(
            f"mask is {mask.height}x{mask.width}, scene is {scene.height}x{scene.width}"
        )

    tiles = []
    for row in range(0, scene.height - tile_size + 1, tile_size):
        for col in range(0, scene.width - tile_size + 1, tile_size):
            window = (slice(row, row + tile_size), slice(col, col + tile_size))
            tiles.append(Tile(
                cube=HyperCube(scene.data[window], scene.wavelengths_nm),
                mask=ClassMask(mask.labels[window]) if mask is not None else None,
                origin=(row, col),
                scene_id=scene_id,
            ))
    logger.debug("Scene %s: %d tiles of %d px", scene_id, len(tiles), tile_size)
    return tiles


def save_tile(tile: Tile, out_dir) -> pathlib.Path:
    out_dir = pathlib.Path(out_dir)
    cube_path = out_dir / f"{tile.tile_id}.hsc"
    save_cube(tile.cube, cube_path)
    if tile.mask is not None:
        save_mask(tile.mask, out_dir / f"{tile.tile_id}.msk")
    return cube_path


def parse_tile_id(tile_id: str) -> Tuple[str, Tuple[int, int]]:
    match = _TILE_NAME.match(tile_id)
    if not match:
        return tile_id, (0, 0)
    return match.group("scene"), (int(match.group("row")), int(match.group("col")))


def load_tiles(tiles_dir, wavelengths: Optional[np.ndarray] = None) -> List[Tile]:
    """Load every ``.hsc`` tile in a directory (with its ``.msk`` when present)."""
    tiles_dir = pathlib.Path(tiles_dir)
    tiles = []
    for cube_path in sorted(tiles_dir.glob("*.hsc")):
        cube = load_cube(cube_path)
        if wavelengths is not None:
            cube = HyperCube(cube.data, wavelengths)
        mask_path = cube_path.with_suffix(".msk")
        mask = load_mask(mask_path) if mask_path.exists() else None
        scene_id, origin = parse_tile_id(cube_path.stem)
        tiles.append(Tile(cube=cube, mask=mask, origin=origin, scene_id=scene_id))
    return tiles


# ---------------------------------------------------------------------------
# Composite and statistics
# ---------------------------------------------------------------------------

def _stretch(channel: np.ndarray) -> np.ndarray:
    low = np.percentile(channel, Constants.STRETCH_LOW_PERCENTILE)
    high = np.percentile(channel, Constants.STRETCH_HIGH_PERCENTILE)
    if high <= low:
        return np.zeros(channel.shape, dtype=np.uint8)
    scaled = (channel - low) / (high - low) * 255.0
    return np.rint(np.clip(scaled, 0.0, 255.0)).astype(np.uint8)


def rgb_composite(
    cube: HyperCube,
    r_band: int,
    g_band: int,
    b_band: int,
    aux_bands: Tuple[int, int] = Constants.COMPOSITE_AUX_BANDS,
    aux_fraction: float = Constants.COMPOSITE_AUX_FRACTION,
) -> np.ndarray:
    """8-bit (H, W, 3) composite with an auxiliary-band boost and a 1-97 percentile stretch."""
    bands = (r_band, g_band, b_band) + tuple(aux_bands)
    for band in bands:
        if not 0 <= band < cube.channels:
            raise BandOutOfRange(f"band {band} outside 0..{cube.channels - 1}")
    if not 0.0 <= aux_fraction <= 1.0:
        raise ValueError(f"aux_fraction must be within [0, 1], got {aux_fraction}")

    data = cube.data.astype(np.float64)
    aux = data[..., list(aux_bands)].mean(axis=-1)
    channels = [_stretch(data[..., band] + aux_fraction * aux) for band in (r_band, g_band, b_band)]
    return np.stack(channels, axis=-1)


def write_ppm(image: np.ndarray, path) -> None:
    """Write an (H, W, 3) uint8 image as binary PPM (P6)."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DimMismatch(f"expected an (H, W, 3) uint8 image, got {image.shape} {image.dtype}")
    try:
        Image.fromarray(image).save(path, format="PPM")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def class_distribution(masks: Sequence[ClassMask], bins: int = Constants.COVERAGE_BINS) -> DatasetStats:
    """Pixel class fractions plus a histogram of per-tile cloud coverage."""
    if not masks:
        raise EmptyInput("class_distribution needs at least one mask")

    counts = np.zeros(Constants.NUM_CLASSES, dtype=np.int64)
    per_mask = []
    for mask in masks:
        mask_counts = np.bincount(mask.labels.ravel(), minlength=Constants.NUM_CLASSES)
        per_mask.append(mask_counts)
        counts += mask_counts
    total = counts.sum()
    if total == 0:
        raise EmptyInput("masks contain no pixels")

    coverage = np.array([mask.cloud_fraction() for mask in masks])
    histogram, edges = np.histogram(coverage, bins=bins, range=(0.0, 1.0))
    # same membership as np.histogram: half-open bins on the returned edges, 1.0 in the last
    bin_index = np.clip(np.searchsorted(edges, coverage, side="right") - 1, 0, bins - 1)
    bin_fractions = []
    for b in range(bins):
        members = [per_mask[i] for i in np.flatnonzero(bin_index == b)]
        bin_total = np.sum(members, axis=0) if members else np.zeros(Constants.NUM_CLASSES)
        denom = bin_total.sum()
        bin_fractions.append(tuple(float(x) for x in (bin_total / denom if denom else bin_total)))

    return DatasetStats(
        tile_count=len(masks),
        class_fractions=tuple(float(c) / total for c in counts),
        coverage_histogram=tuple(int(h) for h in histogram),
        bin_edges=tuple(float(e) for e in edges),
        bin_class_fractions=tuple(bin_fractions),
    )


def synthetic_scene(height: int, width: int, channels: int, seed: int = 0,
                    noise: float = 0.05) -> Tuple[HyperCube, ClassMask]:
    """Spatially coherent three-class scene with well separated class spectra.

    Labels come from horizontal bands of random height, so neighbouring pixels
    share a class; each class has its own smooth spectral signature.
    """
    rng = np.random.default_rng(seed)
    labels = np.zeros((height, width), dtype=np.uint8)
    row = 0
    while row < height:
        run = int(rng.integers(max(1, height // 8), max(2, height // 3) + 1))
        labels[row:row + run, :] = rng.integers(0, Constants.NUM_CLASSES)
        row += run

    grid = np.linspace(0.0, 1.0, channels)
    signatures = np.stack([
        0.2 + 0.1 * grid,
        0.6 + 0.3 * np.sin(np.pi * grid),
        1.2 - 0.4 * grid,
    ])
    data = signatures[labels] + noise * rng.standard_normal((height, width, channels))
    wavelengths = np.linspace(400.0, 2500.0, channels)
    return HyperCube(data.astype(np.float32), wavelengths), ClassMask(labels)
