"""Ground-segment spectral channel selection.

Channels are ranked by their weight in the first principal component of the
standardized pixel spectra. The per-class variant runs PCA for every class,
picks the strongest channel inside each block of highly correlated
neighbouring channels, and resolves conflicts between classes by weight.
"""

import json
import logging
import math
import pathlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from ..common.constants import Constants
from ..common.errors import (
    BandOutOfRange,
    DataError,
    DimMismatch,
    EmptyInput,
    InvalidWavelengths,
    IoFailure,
    NonConvergence,
    TooFewSamples,
    malformed,
)
from .hypercube_service import Tile

logger = logging.getLogger(__name__)


class Standardized(NamedTuple):
    data: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray


@dataclass(frozen=True)
class PcaResult:
    """Eigenpairs of a channel covariance; row ``i`` of ``eigenvectors`` pairs with ``eigenvalues[i]``."""
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    degenerate: Optional[np.ndarray] = None
    sweeps: int = 0

    @property
    def pc1_weights(self) -> np.ndarray:
        return np.abs(self.eigenvectors[0])

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        total = float(np.sum(self.eigenvalues))
        if total <= 0:
            return np.zeros_like(self.eigenvalues)
        return self.eigenvalues / total


@dataclass(frozen=True)
class CorrelationClusters:
    matrix: np.ndarray
    # inclusive (first, last) channel ranges
    clusters: Tuple[Tuple[int, int], ...]
    degenerate: Optional[np.ndarray] = None

    def cluster_of(self, channel: int) -> Tuple[int, int]:
        for first, last in self.clusters:
            if first <= channel <= last:
                return first, last
        raise BandOutOfRange(f"channel {channel} is not covered by any cluster")


@dataclass(frozen=True)
class ChannelProvenance:
    channel: int
    source_class: Optional[int] = None
    cluster: Optional[Tuple[int, int]] = None
    weight: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "channel": self.channel,
            "source_class": self.source_class,
            "cluster": list(self.cluster) if self.cluster is not None else None,
            "weight": self.weight,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChannelProvenance":
        cluster = data.get("cluster")
        return cls(
            channel=int(data["channel"]),
            source_class=data.get("source_class"),
            cluster=tuple(cluster) if cluster is not None else None,
            weight=data.get("weight"),
        )


@dataclass(frozen=True)
class BandSelection:
    channel_indices: Tuple[int, ...]
    channels: int
    mode: str = "manual"
    wavelengths_nm: Optional[Tuple[float, ...]] = None
    provenance: Tuple[ChannelProvenance, ...] = field(default_factory=tuple)
    threshold: Optional[float] = None

    def __post_init__(self):
        indices = tuple(int(i) for i in self.channel_indices)
        if not indices:
            raise EmptyInput("a band selection needs at least one channel")
        if list(indices) != sorted(set(indices)):
            raise DataError(f"channel indices must be sorted and unique, got {list(indices)}")
        if indices[0] < 0 or indices[-1] >= self.channels:
            raise BandOutOfRange(f"channel indices must lie in 0..{self.channels - 1}")
        if self.wavelengths_nm is not None and len(self.wavelengths_nm) != len(indices):
            raise InvalidWavelengths("one wavelength is needed per selected channel")
        object.__setattr__(self, "channel_indices", indices)

    def __len__(self) -> int:
        return len(self.channel_indices)

    def to_dict(self) -> dict:
        return {
            "schema": Constants.BAND_SELECTION_SCHEMA,
            "mode": self.mode,
            "channels": self.channels,
            "channel_indices": list(self.channel_indices),
            "wavelengths_nm": list(self.wavelengths_nm) if self.wavelengths_nm is not None else None,
            "threshold": self.threshold,
            "provenance": [p.to_dict() for p in self.provenance],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BandSelection":
        with malformed("band selection"):
            if data.get("schema") != Constants.BAND_SELECTION_SCHEMA:
                raise DataError(f"unsupported band selection schema {data.get('schema')!r}")
            wavelengths = data.get("wavelengths_nm")
            return cls(
                channel_indices=tuple(data["channel_indices"]),
                channels=int(data["channels"]),
                mode=data.get("mode", "manual"),
                wavelengths_nm=tuple(float(w) for w in wavelengths) if wavelengths is not None else None,
                provenance=tuple(ChannelProvenance.from_dict(p) for p in data.get("provenance", [])),
                threshold=data.get("threshold"),
            )


def _attach_wavelengths(indices: Sequence[int], wavelengths: Optional[Sequence[float]]):
    if wavelengths is None:
        return None
    return tuple(float(wavelengths[i]) for i in indices)


def _as_matrix(pixels) -> np.ndarray:
    matrix = np.asarray(pixels, dtype=np.float64)
    if matrix.ndim != 2:
        raise DimMismatch(f"expected an N x C pixel matrix, got shape {matrix.shape}")
    if matrix.shape[0] < 2:
        raise TooFewSamples(f"need at least 2 pixel spectra, got {matrix.shape[0]}")
    return matrix


# ---------------------------------------------------------------------------
# Standardization, PCA, correlation
# ---------------------------------------------------------------------------

def standardize(pixels) -> Standardized:
    """Zero mean, unit population std per channel; constant channels become zeros."""
    matrix = _as_matrix(pixels)
    mean = matrix.mean(axis=0)
    centered = matrix - mean
    std = np.sqrt((centered ** 2).mean(axis=0))
    degenerate = std < Constants.DEGENERATE_STD
    safe = np.where(degenerate, 1.0, std)
    data = np.where(degenerate, 0.0, centered / safe)
    if degenerate.any():
        logger.debug("Degenerate channels: %s", np.flatnonzero(degenerate).tolist())
    return Standardized(data, mean, std, degenerate)


def jacobi_eigh(
    matrix: np.ndarray,
    tolerance: float = Constants.JACOBI_TOLERANCE,
    max_sweeps: int = Constants.JACOBI_MAX_SWEEPS,
) -> Tuple[np.ndarray, np.ndarray, int]:
    """Cyclic Jacobi rotations on a symmetric matrix.

    Returns (eigenvalues, eigenvectors as columns, sweeps used). Sweeps stop
    once the off-diagonal Frobenius norm is below ``tolerance`` times the
    norm of the input.
    """
    a = np.array(matrix, dtype=np.float64, copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise DimMismatch(f"Jacobi needs a square matrix, got {a.shape}")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = max(float(np.linalg.norm(a)), np.finfo(float).tiny)
    skip = tolerance * scale / max(n, 1)

    def off_norm() -> float:
        return float(np.linalg.norm(a - np.diag(np.diag(a))))

    sweeps = 0
    while off_norm() > tolerance * scale:
        if sweeps >= max_sweeps:
            raise NonConvergence(f"Jacobi did not converge within {max_sweeps} sweeps")
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip:
                    continue
                phi = 0.5 * math.atan2(2.0 * apq, a[q, q] - a[p, p])
                c, s = math.cos(phi), math.sin(phi)
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    return np.diag(a).copy(), v, sweeps


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude component is positive."""
    lead = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(len(vectors)), lead])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def covariance(pixels) -> np.ndarray:
    matrix = _as_matrix(pixels)
    centered = matrix - matrix.mean(axis=0)
    return centered.T @ centered / matrix.shape[0]


def pca(pixels, max_sweeps: int = Constants.JACOBI_MAX_SWEEPS) -> PcaResult:
    """Eigendecomposition of the population covariance of ``pixels``.

    Standardize first to rank channels the way the selection rules expect.
    """
    matrix = _as_matrix(pixels)
    cov = covariance(matrix)
    values, vectors, sweeps = jacobi_eigh(cov, max_sweeps=max_sweeps)
    order = np.argsort(-values, kind="stable")
    eigenvectors = _fix_signs(vectors[:, order].T)
    std = np.sqrt(np.diag(cov))
    logger.debug("PCA over %d channels converged in %d sweeps", cov.shape[0], sweeps)
    return PcaResult(
        eigenvalues=values[order],
        eigenvectors=eigenvectors,
        degenerate=std < Constants.DEGENERATE_STD,
        sweeps=sweeps,
    )


def correlation_clusters(pixels, threshold: float = Constants.CLUSTER_THRESHOLD) -> CorrelationClusters:
    """Pearson matrix plus contiguous channel blocks cut where neighbours fall below ``threshold``.

    Degenerate channels have zero correlation with everything else and each
    forms a cluster of its own.
    """
    z = standardize(pixels)
    n = z.data.shape[0]
    matrix = np.clip(z.data.T @ z.data / n, -1.0, 1.0)
    matrix = 0.5 * (matrix + matrix.T)
    np.fill_diagonal(matrix, 1.0)

    channels = matrix.shape[0]
    clusters = []
    start = 0
    for c in range(channels - 1):
        broken = (
            z.degenerate[c]
            or z.degenerate[c + 1]
            or matrix[c, c + 1] < threshold
        )
        if broken:
            clusters.append((start, c))
            start = c + 1
    clusters.append((start, channels - 1))
    return CorrelationClusters(matrix=matrix, clusters=tuple(clusters), degenerate=z.degenerate)


# ---------------------------------------------------------------------------
# Selection rules
# ---------------------------------------------------------------------------

def _masked_weights(result: PcaResult) -> np.ndarray:
    weights = result.pc1_weights.astype(np.float64, copy=True)
    if result.degenerate is not None:
        weights[np.asarray(result.degenerate, dtype=bool)] = -np.inf
    return weights


def select_single_channel(result: PcaResult, wavelengths: Optional[Sequence[float]] = None) -> BandSelection:
    """The channel with the highest first-component weight; ties go to the lowest index."""
    weights = _masked_weights(result)
    if not np.isfinite(weights).any():
        raise EmptyInput("every channel is degenerate")
    channel = int(np.argmax(weights))
    return BandSelection(
        channel_indices=(channel,),
        channels=len(weights),
        mode="single",
        wavelengths_nm=_attach_wavelengths([channel], wavelengths),
        provenance=(ChannelProvenance(channel, weight=float(weights[channel])),),
    )


def _rank(pick: ChannelProvenance) -> Tuple[float, int, int]:
    # larger wins: weight first, then the lower channel, then the lower class
    return pick.weight, -pick.channel, -pick.source_class


def _overlaps(a: Tuple[int, int], b: Tuple[int, int]) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def _class_candidates(class_id: int, pixels, threshold: float) -> List[ChannelProvenance]:
    z = standardize(pixels)
    result = pca(z.data)
    clusters = correlation_clusters(pixels, threshold)
    weights = _masked_weights(PcaResult(result.eigenvalues, result.eigenvectors, z.degenerate))
    picks = []
    for first, last in clusters.clusters:
        block = weights[first:last + 1]
        if not np.isfinite(block).any():
            continue
        channel = first + int(np.argmax(block))
        picks.append(ChannelProvenance(channel, class_id, (first, last), float(weights[channel])))
    logger.info("Class %d: %d clusters, picks %s", class_id, len(clusters.clusters),
                [p.channel for p in picks])
    return picks


def resolve_overlaps(candidates: Sequence[ChannelProvenance]) -> List[ChannelProvenance]:
    """Keep a pick only if no pick with an overlapping cluster outranks it.

    The rule compares every pair directly, so the result does not depend on
    the order the classes were processed in. A pick is dropped by any higher
    overlapping pick, including one that is itself dropped: in a chain where
    A beats B and B beats C, C goes too even when A and C do not overlap.
    """
    survivors = []
    for pick in candidates:
        beaten = any(
            other is not pick
            and _overlaps(pick.cluster, other.cluster)
            and _rank(other) > _rank(pick)
            for other in candidates
        )
        if not beaten:
            survivors.append(pick)
    unique = {}
    for pick in sorted(survivors, key=_rank, reverse=True):
        unique.setdefault(pick.channel, pick)
    return [unique[c] for c in sorted(unique)]


def select_per_class_channels(
    pixels_by_class: Union[Sequence, Mapping[int, np.ndarray]],
    threshold: float = Constants.CLUSTER_THRESHOLD,
    wavelengths: Optional[Sequence[float]] = None,
    threads: Optional[int] = None,
) -> BandSelection:
    """Per-class PCA, one pick per correlation cluster, conflicts resolved by weight."""
    if isinstance(pixels_by_class, Mapping):
        items = sorted(pixels_by_class.items())
    else:
        items = list(enumerate(pixels_by_class))
    if not items:
        raise EmptyInput("no class pixel matrices given")
    channel_counts = {np.asarray(m).shape[-1] for _, m in items}
    if len(channel_counts) != 1:
        raise DimMismatch(f"class matrices disagree on the channel count: {sorted(channel_counts)}")
    for class_id, matrix in items:
        if np.asarray(matrix).shape[0] < 2:
            raise TooFewSamples(f"class {class_id} has fewer than 2 pixel spectra")

    with ThreadPoolExecutor(max_workers=threads or len(items)) as pool:
        per_class = list(pool.map(lambda item: _class_candidates(item[0], item[1], threshold), items))

    candidates = [pick for picks in per_class for pick in picks]
    survivors = resolve_overlaps(candidates)
    indices = [p.channel for p in survivors]
    return BandSelection(
        channel_indices=tuple(indices),
        channels=channel_counts.pop(),
        mode="perclass",
        wavelengths_nm=_attach_wavelengths(indices, wavelengths),
        provenance=tuple(survivors),
        threshold=threshold,
    )


def select_every_second(
    channels: int,
    limit: Optional[int] = Constants.EVERY_SECOND_LIMIT,
    wavelengths: Optional[Sequence[float]] = None,
) -> BandSelection:
    """Even channel offsets 0, 2, 4, ... truncated to ``limit`` entries."""
    if channels < 2:
        raise EmptyInput(f"every-second selection needs at least 2 channels, got {channels}")
    indices = list(range(0, channels, 2))
    if limit is not None:
        indices = indices[:limit]
    return BandSelection(
        channel_indices=tuple(indices),
        channels=channels,
        mode="every2nd",
        wavelengths_nm=_attach_wavelengths(indices, wavelengths),
        provenance=tuple(ChannelProvenance(i) for i in indices),
    )


def replicate_channels(spectrum, repeats: int) -> np.ndarray:
    """Concatenate the last axis with itself ``repeats`` times."""
    spectrum = np.asarray(spectrum)
    if spectrum.shape[-1] < 1 or repeats < 1:
        raise ValueError("replication needs at least one channel and one repeat")
    reps = (1,) * (spectrum.ndim - 1) + (repeats,)
    return np.tile(spectrum, reps)


def match_wavelengths(selection: BandSelection, target_wavelengths: Sequence[float]) -> BandSelection:
    """Carry a selection over to another sensor by nearest wavelength."""
    if selection.wavelengths_nm is None:
        raise InvalidWavelengths("the selection carries no wavelengths to match")
    target = np.asarray(target_wavelengths, dtype=np.float64)
    if target.ndim != 1 or target.size == 0:
        raise InvalidWavelengths("target wavelength table is empty")
    matched = {}
    for source, wavelength in zip(selection.channel_indices, selection.wavelengths_nm):
        nearest = int(np.argmin(np.abs(target - wavelength)))
        matched.setdefault(nearest, source)
    indices = sorted(matched)
    by_source = {p.channel: p for p in selection.provenance}
    provenance = []
    for index in indices:
        original = by_source.get(matched[index])
        provenance.append(ChannelProvenance(
            channel=index,
            source_class=original.source_class if original else None,
            cluster=original.cluster if original else None,
            weight=original.weight if original else None,
        ))
    return BandSelection(
        channel_indices=tuple(indices),
        channels=int(target.size),
        mode=f"{selection.mode}+matched",
        wavelengths_nm=tuple(float(target[i]) for i in indices),
        provenance=tuple(provenance),
        threshold=selection.threshold,
    )


# ---------------------------------------------------------------------------
# Pixel sampling and persistence
# ---------------------------------------------------------------------------

def sample_pixels(
    tiles: Sequence[Tile],
    per_tile: int = Constants.PIXELS_PER_TILE,
    seed: int = 0,
    by_class: bool = False,
):
    """Seeded subsample of pixel spectra, pooled or split per class id.

    Tiles are visited in the given order with one generator, so the sample
    depends only on (tiles, per_tile, seed).
    """
    if not tiles:
        raise EmptyInput("no tiles to sample pixels from")
    rng = np.random.default_rng(seed)
    pooled, labels = [], []
    for tile in tiles:
        spectra = tile.cube.pixels()
        count = min(per_tile, len(spectra))
        index = np.sort(rng.choice(len(spectra), size=count, replace=False))
        pooled.append(spectra[index].astype(np.float64))
        if by_class:
            if tile.mask is None:
                raise DataError(f"tile {tile.tile_id} has no mask; per-class sampling needs labels")
            labels.append(tile.mask.labels.ravel()[index])
    matrix = np.concatenate(pooled)
    if not by_class:
        return matrix
    labels = np.concatenate(labels)
    return {c: matrix[labels == c] for c in range(Constants.NUM_CLASSES)}


def save_selection(selection: BandSelection, path) -> None:
    try:
        pathlib.Path(path).write_text(json.dumps(selection.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_selection(path) -> BandSelection:
    try:
        data = json.loads(pathlib.Path(path).read_text())
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not a band selection file: {e}") from e
    return BandSelection.from_dict(data)
