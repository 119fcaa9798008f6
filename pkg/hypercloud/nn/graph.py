"""Layer specifications and a small graph executor with a gradient tape."""

import enum
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..common.errors import ShapeMismatch, TapeMissing
from . import layers as K

INPUT = "input"


class LayerKind(str, enum.Enum):
    CONV1D = "Conv1D"
    CONV2D = "Conv2D"
    MAXPOOL1D = "MaxPool1D"
    MAXPOOL2D = "MaxPool2D"
    UPSAMPLE2D = "UpsampleNearest2D"
    CONCAT = "Concat"
    RELU = "ReLU"
    FLATTEN = "Flatten"
    DENSE = "Dense"
    SOFTMAX = "Softmax"


LEARNABLE = {LayerKind.CONV1D, LayerKind.CONV2D, LayerKind.DENSE}


@dataclass
class LayerSpec:
    """One node of a model graph.

    ``inputs`` names earlier nodes (or ``"input"``); ``params`` holds
    ``weight``/``bias`` for learnable kinds.
    """
    name: str
    kind: LayerKind
    inputs: Tuple[str, ...]
    hyper: Dict[str, Any] = field(default_factory=dict)
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    def expected_param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        h = self.hyper
        if self.kind == LayerKind.CONV1D:
            return {"weight": (h["kernel"], h["in_channels"], h["filters"]), "bias": (h["filters"],)}
        if self.kind == LayerKind.CONV2D:
            k = h["kernel"]
            return {"weight": (k, k, h["in_channels"], h["filters"]), "bias": (h["filters"],)}
        if self.kind == LayerKind.DENSE:
            return {"weight": (h["in_features"], h["units"]), "bias": (h["units"],)}
        return {}

    def validate(self) -> None:
        expected = self.expected_param_shapes()
        actual = {name: tuple(p.shape) for name, p in self.params.items()}
        if expected != actual:
            raise ShapeMismatch(f"layer {self.name}: parameters {actual} do not match {expected}")

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))


@dataclass
class GradientTape:
    """Activations cached by a recorded forward pass, and the gradients backward fills in."""
    records: List[Tuple[LayerSpec, Dict[str, Any]]] = field(default_factory=list)
    param_grads: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    input_grad: Optional[np.ndarray] = None


def init_params(specs: Sequence[LayerSpec], seed: int) -> None:
    """He-uniform for convolutions, Glorot-uniform for dense layers, zero biases.

    Parameters are drawn in layer order from a single seeded generator.
    """
    rng = np.random.default_rng(seed)
    for spec in specs:
        shapes = spec.expected_param_shapes()
        if not shapes:
            continue
        weight_shape = shapes["weight"]
        if spec.kind == LayerKind.DENSE:
            fan_in, fan_out = weight_shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        else:
            fan_in = int(np.prod(weight_shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
        spec.params = {
            "weight": rng.uniform(-limit, limit, size=weight_shape),
            "bias": np.zeros(shapes["bias"]),
        }


# ---------------------------------------------------------------------------
# Per-kind forward / backward
# ---------------------------------------------------------------------------

def _forward_node(spec: LayerSpec, args: List[np.ndarray]):
    kind, p, h = spec.kind, spec.params, spec.hyper
    x = args[0]
    if kind == LayerKind.CONV1D:
        return K.conv1d_forward(x, p["weight"], p["bias"]), {"x": x}
    if kind == LayerKind.CONV2D:
        return K.conv2d_forward(x, p["weight"], p["bias"]), {"x": x}
    if kind == LayerKind.MAXPOOL1D:
        out, routing = K.maxpool1d_forward(x, h.get("pool", 2))
        return out, {"shape": x.shape, "routing": routing}
    if kind == LayerKind.MAXPOOL2D:
        out, routing = K.maxpool2d_forward(x, h.get("pool", 2))
        return out, {"shape": x.shape, "routing": routing}
    if kind == LayerKind.UPSAMPLE2D:
        return K.upsample_nearest_forward(x, h.get("factor", 2)), {}
    if kind == LayerKind.CONCAT:
        return K.concat_forward(args), {"sizes": [a.shape[-1] for a in args]}
    if kind == LayerKind.RELU:
        return K.relu_forward(x), {"x": x}
    if kind == LayerKind.FLATTEN:
        return x.reshape(x.shape[0], -1), {"shape": x.shape}
    if kind == LayerKind.DENSE:
        return K.dense_forward(x, p["weight"], p["bias"]), {"x": x}
    if kind == LayerKind.SOFTMAX:
        probs = K.softmax_forward(x)
        return probs, {"probs": probs}
    raise ValueError(f"unknown layer kind {kind}")


def _backward_node(spec: LayerSpec, cache: Dict[str, Any], grad: np.ndarray):
    """Return (gradients for each input, parameter gradients)."""
    kind, p, h = spec.kind, spec.params, spec.hyper
    if kind == LayerKind.CONV1D:
        gx, gw, gb = K.conv1d_backward(cache["x"], p["weight"], grad)
        return [gx], {"weight": gw, "bias": gb}
    if kind == LayerKind.CONV2D:
        gx, gw, gb = K.conv2d_backward(cache["x"], p["weight"], grad)
        return [gx], {"weight": gw, "bias": gb}
    if kind == LayerKind.MAXPOOL1D:
        return [K.maxpool1d_backward(cache["shape"], cache["routing"], grad, h.get("pool", 2))], {}
    if kind == LayerKind.MAXPOOL2D:
        return [K.maxpool2d_backward(cache["shape"], cache["routing"], grad, h.get("pool", 2))], {}
    if kind == LayerKind.UPSAMPLE2D:
        return [K.upsample_nearest_backward(grad, h.get("factor", 2))], {}
    if kind == LayerKind.CONCAT:
        return K.concat_backward(cache["sizes"], grad), {}
    if kind == LayerKind.RELU:
        return [K.relu_backward(cache["x"], grad)], {}
    if kind == LayerKind.FLATTEN:
        return [grad.reshape(cache["shape"])], {}
    if kind == LayerKind.DENSE:
        gx, gw, gb = K.dense_backward(cache["x"], p["weight"], grad)
        return [gx], {"weight": gw, "bias": gb}
    if kind == LayerKind.SOFTMAX:
        return [K.softmax_backward(cache["probs"], grad)], {}
    raise ValueError(f"unknown layer kind {kind}")


# ---------------------------------------------------------------------------
# Graph execution
# ---------------------------------------------------------------------------

def _consumers(specs: Sequence[LayerSpec]) -> Dict[str, int]:
    last_use: Dict[str, int] = {}
    for index, spec in enumerate(specs):
        for name in spec.inputs:
            last_use[name] = index
    return last_use


def run_forward(specs: Sequence[LayerSpec], x: np.ndarray, record: bool = False):
    """Evaluate the graph; returns (output of the last node, tape or None)."""
    if not specs:
        return x, (GradientTape() if record else None)
    values: Dict[str, np.ndarray] = {INPUT: x}
    last_use = _consumers(specs)
    tape = GradientTape() if record else None
    for index, spec in enumerate(specs):
        args = [values[name] for name in spec.inputs]
        out, cache = _forward_node(spec, args)
        values[spec.name] = out
        if tape is not None:
            tape.records.append((spec, cache))
        else:
            for name in spec.inputs:
                if last_use.get(name) == index:
                    values.pop(name, None)
    return values[specs[-1].name], tape


def backward(
    tape: Optional[GradientTape],
    loss_grad: np.ndarray,
    through_softmax: bool = True,
) -> Dict[str, Dict[str, np.ndarray]]:
    """Propagate ``loss_grad`` (w.r.t. the graph output) back through a recorded pass.

    With ``through_softmax=False`` the gradient is taken to be w.r.t. the input
    of a final Softmax node, which is then skipped; this is how the fused
    softmax + cross-entropy gradient (p - onehot) / batch enters.
    """
    if tape is None or not tape.records:
        raise TapeMissing("backward needs a tape recorded by run_forward(record=True)")

    records = list(tape.records)
    last_spec = records[-1][0]
    grads: Dict[str, np.ndarray] = {}
    if not through_softmax and last_spec.kind == LayerKind.SOFTMAX:
        grads[last_spec.inputs[0]] = loss_grad
        records.pop()
    else:
        grads[last_spec.name] = loss_grad

    tape.param_grads = {}
    for spec, cache in reversed(records):
        grad = grads.pop(spec.name, None)
        if grad is None:
            grad_inputs = None
            param_grads = {name: np.zeros_like(value) for name, value in spec.params.items()}
        else:
            grad_inputs, param_grads = _backward_node(spec, cache, grad)
        if param_grads:
            tape.param_grads[spec.name] = param_grads
        if grad_inputs is None:
            continue
        for name, g in zip(spec.inputs, grad_inputs):
            if name in grads:
                grads[name] = grads[name] + g
            else:
                grads[name] = g
    tape.input_grad = grads.get(INPUT)
    return tape.param_grads


def output_shapes(specs: Sequence[LayerSpec], input_shape: Tuple[int, ...]) -> Dict[str, Tuple[int, ...]]:
    """Shape of every node for a single unbatched sample, found by a zero-input pass."""
    dummy = np.zeros((1,) + tuple(input_shape), dtype=np.float32)
    shapes = {INPUT: tuple(input_shape)}
    values: Dict[str, np.ndarray] = {INPUT: dummy}
    for spec in specs:
        out, _ = _forward_node(spec, [values[name] for name in spec.inputs])
        values[spec.name] = out
        shapes[spec.name] = tuple(out.shape[1:])
    return shapes


def param_items(specs: Sequence[LayerSpec]):
    for spec in specs:
        for name in ("weight", "bias"):
            if name in spec.params:
                yield f"{spec.name}.{name}", spec.params[name]


def copy_specs(specs: Sequence[LayerSpec], dtype=None) -> List[LayerSpec]:
    copies = []
    for spec in specs:
        params = {
            name: np.array(value, dtype=dtype or value.dtype, copy=True)
            for name, value in spec.params.items()
        }
        copies.append(LayerSpec(spec.name, spec.kind, tuple(spec.inputs), dict(spec.hyper), params))
    return copies


def set_params(specs: Sequence[LayerSpec], tensors: Mapping[str, np.ndarray]) -> None:
    for spec in specs:
        for name in list(spec.params):
            spec.params[name] = tensors[f"{spec.name}.{name}"]
