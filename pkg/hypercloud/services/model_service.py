"""The two cloud-segmentation networks, their size accounting and on-disk manifest."""

import enum
import json
import logging
import pathlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..common.constants import Constants
from ..common.errors import DataError, InputTooShort, IoFailure, ShapeMismatch, malformed
from ..nn import weights as wgt
from ..nn.graph import INPUT, LayerKind, LayerSpec, copy_specs, init_params, output_shapes, run_forward

logger = logging.getLogger(__name__)

MANIFEST_NAME = "model.json"
WEIGHTS_NAME = "model.wgt"


class ModelKind(str, enum.Enum):
    LIUNET_1D = "liunet1d"
    UNET_2D = "unet2dsimple"


@dataclass
class ModelGraph:
    """A named layer graph plus its input contract.

    ``input_shape`` excludes the batch axis: ``(L, 1)`` for the spectral
    network, ``(S, S, C)`` for the tile network. Forward passes always take
    a leading batch axis.
    """
    name: str
    kind: ModelKind
    layers: List[LayerSpec]
    input_shape: Tuple[int, ...]
    num_classes: int = Constants.NUM_CLASSES
    seed: int = 0

    @property
    def parameter_count(self) -> int:
        return sum(spec.parameter_count for spec in self.layers)

    @property
    def dtype(self) -> np.dtype:
        for spec in self.layers:
            for value in spec.params.values():
                return value.dtype
        return np.dtype(np.float32)

    def forward(self, batch: np.ndarray, record: bool = False):
        if tuple(batch.shape[1:]) != tuple(self.input_shape):
            raise ShapeMismatch(
                f"{self.name} expects inputs of shape (N, {', '.join(map(str, self.input_shape))}), "
                f"got {batch.shape}"
            )
        return run_forward(self.layers, batch, record=record)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        probs, _ = self.forward(batch)
        return probs

    def copy(self, dtype=None) -> "ModelGraph":
        return ModelGraph(
            name=self.name,
            kind=self.kind,
            layers=copy_specs(self.layers, dtype=dtype),
            input_shape=tuple(self.input_shape),
            num_classes=self.num_classes,
            seed=self.seed,
        )

    def as_inference(self) -> "ModelGraph":
        """Float32 copy, the precision weights are stored and deployed in."""
        return self.copy(dtype=np.float32)

    def as_training(self) -> "ModelGraph":
        return self.copy(dtype=np.float64)


@dataclass(frozen=True)
class LayerSize:
    name: str
    kind: str
    parameters: int
    macs: int


@dataclass(frozen=True)
class SizeReport:
    parameter_count: int
    bytes_in_memory: int
    bytes_on_disk: int
    macs: int
    layers: Tuple[LayerSize, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "parameter_count": self.parameter_count,
            "bytes_in_memory": self.bytes_in_memory,
            "bytes_on_disk": self.bytes_on_disk,
            "macs": self.macs,
            "layers": [
                {"name": l.name, "kind": l.kind, "parameters": l.parameters, "macs": l.macs}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SizeReport":
        return cls(
            parameter_count=int(data["parameter_count"]),
            bytes_in_memory=int(data["bytes_in_memory"]),
            bytes_on_disk=int(data["bytes_on_disk"]),
            macs=int(data["macs"]),
            layers=tuple(
                LayerSize(l["name"], l["kind"], int(l["parameters"]), int(l["macs"]))
                for l in data.get("layers", [])
            ),
        )


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def liunet_length_chain(input_length: int, kernel: int = Constants.LIUNET_KERNEL,
                        blocks: int = len(Constants.LIUNET_FILTERS)) -> List[int]:
    """Spectral length after the input and after every conv and pool stage."""
    chain = [input_length]
    length = input_length
    for block in range(blocks):
        if length < kernel:
            raise InputTooShort(
                f"spectrum of length {input_length} is exhausted before block {block + 1} "
                f"(length {length} < kernel {kernel}); replicate channels to at least "
                f"{Constants.MIN_1D_INPUT_LENGTH}"
            )
        length = length - kernel + 1
        chain.append(length)
        if length < 2:
            raise InputTooShort(
                f"spectrum of length {input_length} cannot be pooled in block {block + 1}"
            )
        length //= 2
        chain.append(length)
    return chain


def build_liunet_1d(input_length: int, seed: int = 0) -> ModelGraph:
    """Four [conv1d k=6, ReLU, maxpool 2] blocks, flatten, dense, softmax."""
    chain = liunet_length_chain(input_length)
    kernel = Constants.LIUNET_KERNEL
    layers: List[LayerSpec] = []
    previous, in_channels = INPUT, 1
    for block, filters in enumerate(Constants.LIUNET_FILTERS, start=1):
        layers += [
            LayerSpec(f"block{block}_conv", LayerKind.CONV1D, (previous,),
                      {"kernel": kernel, "in_channels": in_channels, "filters": filters}),
            LayerSpec(f"block{block}_relu", LayerKind.RELU, (f"block{block}_conv",)),
            LayerSpec(f"block{block}_pool", LayerKind.MAXPOOL1D, (f"block{block}_relu",), {"pool": 2}),
        ]
        previous, in_channels = f"block{block}_pool", filters
    features = chain[-1] * in_channels
    layers += [
        LayerSpec("flatten", LayerKind.FLATTEN, (previous,)),
        LayerSpec("dense", LayerKind.DENSE, ("flatten",),
                  {"in_features": features, "units": Constants.NUM_CLASSES}),
        LayerSpec("softmax", LayerKind.SOFTMAX, ("dense",)),
    ]
    init_params(layers, seed)
    return ModelGraph("LiuNet-1D", ModelKind.LIUNET_1D, layers, (input_length, 1), seed=seed)


def _conv2d(name: str, source: str, in_channels: int, filters: int, kernel: int = 3) -> LayerSpec:
    return LayerSpec(name, LayerKind.CONV2D, (source,),
                     {"kernel": kernel, "in_channels": in_channels, "filters": filters})


def build_unet2d_simple(channels: int, tile_size: int = Constants.CROP_SIZE, seed: int = 0) -> ModelGraph:
    """Two-level U-Net: encoder pools to a quarter, decoder concatenates pre-pool skips."""
    if channels < 1:
        raise ValueError("the 2D network needs at least one input channel")
    if tile_size < 4 or tile_size % 4:
        raise ShapeMismatch(f"tile size {tile_size} must be a positive multiple of 4")
    e1, e2, mid, d1, d2 = Constants.UNET_FILTERS
    layers = [
        _conv2d("enc1_conv", INPUT, channels, e1),
        LayerSpec("enc1_relu", LayerKind.RELU, ("enc1_conv",)),
        LayerSpec("enc1_pool", LayerKind.MAXPOOL2D, ("enc1_relu",), {"pool": 2}),
        _conv2d("enc2_conv", "enc1_pool", e1, e2),
        LayerSpec("enc2_relu", LayerKind.RELU, ("enc2_conv",)),
        LayerSpec("enc2_pool", LayerKind.MAXPOOL2D, ("enc2_relu",), {"pool": 2}),
        _conv2d("bottleneck_conv", "enc2_pool", e2, mid),
        LayerSpec("bottleneck_relu", LayerKind.RELU, ("bottleneck_conv",)),
        LayerSpec("dec1_up", LayerKind.UPSAMPLE2D, ("bottleneck_relu",), {"factor": 2}),
        LayerSpec("dec1_concat", LayerKind.CONCAT, ("dec1_up", "enc2_relu")),
        _conv2d("dec1_conv", "dec1_concat", mid + e2, d1),
        LayerSpec("dec1_relu", LayerKind.RELU, ("dec1_conv",)),
        LayerSpec("dec2_up", LayerKind.UPSAMPLE2D, ("dec1_relu",), {"factor": 2}),
        LayerSpec("dec2_concat", LayerKind.CONCAT, ("dec2_up", "enc1_relu")),
        _conv2d("dec2_conv", "dec2_concat", d1 + e1, d2),
        LayerSpec("dec2_relu", LayerKind.RELU, ("dec2_conv",)),
        _conv2d("head", "dec2_relu", d2, Constants.NUM_CLASSES, kernel=1),
        LayerSpec("softmax", LayerKind.SOFTMAX, ("head",)),
    ]
    init_params(layers, seed)
    return ModelGraph("UNet-Simple-2D", ModelKind.UNET_2D, layers, (tile_size, tile_size, channels), seed=seed)


def build_model(kind, input_channels: int, seed: int = 0, tile_size: int = Constants.CROP_SIZE) -> ModelGraph:
    """Build either network; ``input_channels`` is the spectrum length for the 1D one."""
    kind = ModelKind(kind)
    if kind == ModelKind.LIUNET_1D:
        return build_liunet_1d(input_channels, seed=seed)
    return build_unet2d_simple(input_channels, tile_size=tile_size, seed=seed)


# ---------------------------------------------------------------------------
# Size accounting
# ---------------------------------------------------------------------------

def layer_shapes(model: ModelGraph) -> Dict[str, Tuple[int, ...]]:
    """Per-sample output shape of every node, keyed by node name (plus ``"input"``)."""
    return output_shapes(model.layers, model.input_shape)


def _layer_macs(spec: LayerSpec, out_shape: Tuple[int, ...]) -> int:
    h = spec.hyper
    if spec.kind == LayerKind.CONV1D:
        return out_shape[0] * h["kernel"] * h["in_channels"] * h["filters"]
    if spec.kind == LayerKind.CONV2D:
        return out_shape[0] * out_shape[1] * h["kernel"] ** 2 * h["in_channels"] * h["filters"]
    if spec.kind == LayerKind.DENSE:
        return h["in_features"] * h["units"]
    return 0


def size_report(model: ModelGraph) -> SizeReport:
    shapes = layer_shapes(model) if model.layers else {}
    layers = tuple(
        LayerSize(spec.name, spec.kind.value, spec.parameter_count, _layer_macs(spec, shapes[spec.name]))
        for spec in model.layers
    )
    count = model.parameter_count
    return SizeReport(
        parameter_count=count,
        bytes_in_memory=4 * count,
        bytes_on_disk=wgt.serialized_size(model.layers),
        macs=sum(l.macs for l in layers),
        layers=layers,
    )


# ---------------------------------------------------------------------------
# Manifest + weights on disk
# ---------------------------------------------------------------------------

def manifest(model: ModelGraph) -> dict:
    return {
        "schema": Constants.MODEL_MANIFEST_SCHEMA,
        "name": model.name,
        "kind": model.kind.value,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "seed": model.seed,
        "layers": [
            {"name": s.name, "kind": s.kind.value, "inputs": list(s.inputs), "hyper": s.hyper}
            for s in model.layers
        ],
    }


def save_model(model: ModelGraph, out_dir) -> pathlib.Path:
    """Write ``model.json`` and ``model.wgt`` into ``out_dir``; returns the weight path."""
    out_dir = pathlib.Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest(model), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write model manifest to {out_dir}: {e}") from e
    weights_path = out_dir / WEIGHTS_NAME
    wgt.save_weights(model.layers, weights_path)
    logger.info("Saved %s (%d parameters) to %s", model.name, model.parameter_count, out_dir)
    return weights_path


def model_from_manifest(data: dict) -> ModelGraph:
    """Rebuild the graph structure a manifest describes; parameters are left empty."""
    with malformed("model manifest"):
        if data.get("schema") != Constants.MODEL_MANIFEST_SCHEMA:
            raise DataError(f"unsupported model manifest schema {data.get('schema')!r}")
        layers = [
            LayerSpec(entry["name"], LayerKind(entry["kind"]), tuple(entry["inputs"]), dict(entry["hyper"]))
            for entry in data["layers"]
        ]
        return ModelGraph(
            name=data["name"],
            kind=ModelKind(data["kind"]),
            layers=layers,
            input_shape=tuple(data["input_shape"]),
            num_classes=int(data["num_classes"]),
            seed=int(data.get("seed", 0)),
        )


def load_model(model_dir, weights_path: Optional[str] = None) -> ModelGraph:
    """Load a saved model as a float32 inference graph."""
    model_dir = pathlib.Path(model_dir)
    try:
        data = json.loads((model_dir / MANIFEST_NAME).read_text())
    except OSError as e:
        raise IoFailure(f"cannot read model manifest in {model_dir}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"model manifest in {model_dir} is not valid JSON: {e}") from e
    model = model_from_manifest(data)
    model.layers = wgt.load_weights(weights_path or model_dir / WEIGHTS_NAME, model.layers)
    return model


def scenario_input_length(channel_count: int) -> int:
    """Spectrum length the 1D network sees for a channel scenario after replication."""
    return channel_count * replication_factor(channel_count)


def replication_factor(channel_count: int) -> int:
    """Smallest repeat count that lifts ``channel_count`` to the minimum 1D length."""
    if channel_count < 1:
        raise ValueError("channel_count must be positive")
    return max(1, -(-Constants.MIN_1D_INPUT_LENGTH // channel_count))

