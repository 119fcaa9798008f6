"""The .wgt weight file: little-endian float32 tensors keyed by ``<layer>.<param>``.

Layout::

    magic "WGT1" | version u16 | entry count u32
    per entry: name length u16 | UTF-8 name | rank u8 | rank x extent u32
               | element count u32 | element count x float32
"""

import logging
import pathlib
import struct
from typing import Dict, List, Sequence

import numpy as np

from ..common.constants import Constants
from ..common.errors import BadMagic, IoFailure, ShapeMismatch
from .graph import LayerSpec, copy_specs, param_items

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sHI")


def serialized_size(specs: Sequence[LayerSpec]) -> int:
    size = _HEADER.size
    for name, tensor in param_items(specs):
        size += 7 + len(name.encode("utf-8")) + 4 * tensor.ndim + 4 * tensor.size
    return size


def dumps(specs: Sequence[LayerSpec]) -> bytes:
    entries = list(param_items(specs))
    chunks = [_HEADER.pack(Constants.WEIGHTS_MAGIC, Constants.WEIGHTS_VERSION, len(entries))]
    for name, tensor in entries:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{tensor.ndim}I", tensor.ndim, *tensor.shape))
        chunks.append(struct.pack("<I", tensor.size))
        chunks.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    return b"".join(chunks)


def _parse(raw: bytes) -> Dict[str, np.ndarray]:
    if len(raw) < _HEADER.size or raw[:4] != Constants.WEIGHTS_MAGIC:
        raise BadMagic("not a weight file")
    _, _version, count = _HEADER.unpack_from(raw)
    offset = _HEADER.size
    tensors: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            (elements,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            if elements != int(np.prod(shape, dtype=np.int64)):
                raise ShapeMismatch(f"entry {name}: extents {shape} disagree with {elements} elements")
            end = offset + 4 * elements
            if end > len(raw):
                raise ShapeMismatch(f"entry {name} is truncated")
            tensors[name] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).astype(np.float32)
            offset = end
    except struct.error as e:
        raise ShapeMismatch(f"weight file is truncated: {e}") from e
    if offset != len(raw):
        raise ShapeMismatch(f"{len(raw) - offset} trailing bytes after the last entry")
    return tensors


def loads(raw: bytes, specs: Sequence[LayerSpec]) -> List[LayerSpec]:
    """Return float32 copies of ``specs`` carrying the tensors stored in ``raw``."""
    tensors = _parse(raw)
    expected = {}
    for spec in specs:
        for pname, shape in spec.expected_param_shapes().items():
            expected[f"{spec.name}.{pname}"] = shape
    found = {name: tuple(t.shape) for name, t in tensors.items()}
    if set(found) != set(expected):
        missing = sorted(set(expected) - set(found))
        extra = sorted(set(found) - set(expected))
        raise ShapeMismatch(f"weight entries differ from the model: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if found[name] != shape:
            raise ShapeMismatch(f"{name}: stored shape {found[name]} but the model needs {shape}")

    loaded = copy_specs(specs, dtype=np.float32)
    for spec in loaded:
        spec.params = {pname: tensors[f"{spec.name}.{pname}"] for pname in spec.expected_param_shapes()}
    return loaded


def save_weights(specs: Sequence[LayerSpec], path) -> int:
    payload = dumps(specs)
    try:
        pathlib.Path(path).write_bytes(payload)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    logger.debug("Wrote %d bytes of weights to %s", len(payload), path)
    return len(payload)


def load_weights(path, specs: Sequence[LayerSpec]) -> List[LayerSpec]:
    try:
        raw = pathlib.Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    return loads(raw, specs)
