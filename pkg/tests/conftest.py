import numpy as np
import pytest

from hypercloud.services.bandselect_service import BandSelection
from hypercloud.services.hypercube_service import ClassMask, HyperCube, Tile, synthetic_scene, tile_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_tiles(count=3, size=16, channels=8, seed=0, scene_id="syn"):
    """``count`` labelled square tiles cut side by side from one synthetic scene."""
    cube, mask = synthetic_scene(size, size * count, channels, seed=seed)
    return tile_scene(cube, mask, tile_size=size, scene_id=scene_id)


def all_channels(channels):
    return BandSelection(tuple(range(channels)), channels, mode="all")


def constant_tile(labels, channels=4, origin=(0, 0), scene_id="const"):
    labels = np.asarray(labels, dtype=np.uint8)
    h, w = labels.shape
    data = np.repeat(labels[..., None].astype(np.float32), channels, axis=-1)
    return Tile(HyperCube(data), ClassMask(labels), origin=origin, scene_id=scene_id)


@pytest.fixture
def small_tiles():
    return make_tiles()
