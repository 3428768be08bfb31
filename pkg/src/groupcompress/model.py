"""Feed-forward CNN representation, forward execution and FLOPs accounting.

A network is an ordered list of layers forming a DAG with one input and one
output. Each layer consumes the previous layer's output unless it names an
explicit ``input``; ``add`` layers additionally read a named ``source``.
Supported kinds: conv, relu, maxpool, avgpool, add, fc, channel_affine.

FLOPs convention: two operations per multiply-accumulate, bias and
activations excluded. Only conv and fc layers carry FLOPs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
import warnings

import numpy as np

from . import linalg
from .errors import ShapeError

LAYER_KINDS = ("conv", "relu", "maxpool", "avgpool", "add", "fc", "channel_affine")


@dataclass
class ConvWeights:
    """Weights and geometry of one convolutional layer.

    ``weights`` has shape (c_out, c_in // groups, k, k) and may be None for
    shape-only networks (FLOPs counting without materialized parameters).
    """

    c_in: int
    c_out: int
    k: int
    groups: int = 1
    stride: int = 1
    pad: int = 0
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.c_in < 1 or self.c_out < 1 or self.k < 1:
            raise ShapeError("conv dimensions must be positive")
        if self.c_in % self.groups or self.c_out % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide c_in={self.c_in} and c_out={self.c_out}"
            )
        expected = (self.c_out, self.c_in // self.groups, self.k, self.k)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != expected:
                raise ShapeError(
                    f"conv weights shape {self.weights.shape} != expected {expected}"
                )
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.c_out,):
                raise ShapeError(f"bias shape {self.bias.shape} != ({self.c_out},)")

    def weight_matrix(self) -> np.ndarray:
        """The (c_in * k^2) x c_out matrix form of an ungrouped layer.

        Row ordering matches im2col columns (channel-major, then kernel row,
        then kernel column).
        """
        if self.groups != 1:
            raise ShapeError("weight_matrix is defined for groups == 1")
        if self.weights is None:
            raise ShapeError("layer has no materialized weights")
        return self.weights.reshape(self.c_out, -1).T

    def group_matrix(self, g: int) -> np.ndarray:
        """Matrix form ((c_in/groups)*k^2 x c_out/groups) of one filter group."""
        if self.weights is None:
            raise ShapeError("layer has no materialized weights")
        per_group = self.c_out // self.groups
        block = self.weights[g * per_group : (g + 1) * per_group]
        return block.reshape(per_group, -1).T

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        h_out = (h + 2 * self.pad - self.k) // self.stride + 1
        w_out = (w + 2 * self.pad - self.k) // self.stride + 1
        return h_out, w_out


@dataclass
class PoolParams:
    k: int
    stride: int
    pad: int = 0

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        h_out = (h + 2 * self.pad - self.k) // self.stride + 1
        w_out = (w + 2 * self.pad - self.k) // self.stride + 1
        return h_out, w_out


@dataclass
class FcParams:
    in_features: int
    out_features: int
    weights: np.ndarray | None = None  # (out_features, in_features)
    bias: np.ndarray | None = None


@dataclass
class AffineParams:
    """Per-channel scale and shift (inference-time batch norm stand-in)."""

    channels: int
    scale: np.ndarray | None = None
    shift: np.ndarray | None = None


@dataclass
class LayerSpec:
    id: str
    kind: str
    stage: str | None = None
    input: str | None = None  # defaults to the previous layer
    source: str | None = None  # second operand of `add`
    conv: ConvWeights | None = None
    pool: PoolParams | None = None
    fc: FcParams | None = None
    affine: AffineParams | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"layer {self.id}: unknown kind {self.kind!r}")


@dataclass
class NetworkSpec:
    name: str
    input_shape: tuple[int, int, int]  # C x H x W
    layers: list[LayerSpec]

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        seen = set()
        for layer in self.layers:
            if layer.id in seen:
                raise ShapeError(f"duplicate layer id {layer.id!r}")
            seen.add(layer.id)

    def layer(self, layer_id: str) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(f"no layer named {layer_id!r}")

    def index_of(self, layer_id: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.id == layer_id:
                return i
        raise KeyError(f"no layer named {layer_id!r}")

    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv"]


def propagate_shapes(net: NetworkSpec) -> dict[str, tuple]:
    """Output shape of every layer; raises (naming the layer) on mismatch.

    Shapes are (C, H, W) except after fc, which yields (features,).
    """
    shapes: dict[str, tuple] = {}
    prev_shape = net.input_shape
    prev_id = None
    for layer in net.layers:
        in_id = layer.input if layer.input is not None else prev_id
        if in_id is None:
            in_shape = net.input_shape
        else:
            if in_id not in shapes:
                raise ShapeError(f"layer {layer.id}: input {in_id!r} not defined earlier")
            in_shape = shapes[in_id]

        if layer.kind == "conv":
            conv = layer.conv
            c, h, w = in_shape
            if c != conv.c_in:
                raise ShapeError(
                    f"layer {layer.id}: expects {conv.c_in} channels, got {c}"
                )
            h_out, w_out = conv.out_size(h, w)
            if h_out < 1 or w_out < 1:
                raise ShapeError(f"layer {layer.id}: degenerate output {h_out}x{w_out}")
            out_shape = (conv.c_out, h_out, w_out)
        elif layer.kind in ("relu", "channel_affine"):
            if layer.kind == "channel_affine" and in_shape[0] != layer.affine.channels:
                raise ShapeError(
                    f"layer {layer.id}: affine over {layer.affine.channels} channels, "
                    f"input has {in_shape[0]}"
                )
            out_shape = in_shape
        elif layer.kind in ("maxpool", "avgpool"):
            c, h, w = in_shape
            h_out, w_out = layer.pool.out_size(h, w)
            if h_out < 1 or w_out < 1:
                raise ShapeError(f"layer {layer.id}: degenerate output {h_out}x{w_out}")
            out_shape = (c, h_out, w_out)
        elif layer.kind == "add":
            if layer.source is None or layer.source not in shapes:
                raise ShapeError(f"layer {layer.id}: add source must be an earlier layer")
            if shapes[layer.source] != in_shape:
                raise ShapeError(
                    f"layer {layer.id}: add shapes differ "
                    f"{in_shape} vs {shapes[layer.source]}"
                )
            out_shape = in_shape
        elif layer.kind == "fc":
            n_in = int(np.prod(in_shape))
            if n_in != layer.fc.in_features:
                raise ShapeError(
                    f"layer {layer.id}: fc expects {layer.fc.in_features} features, "
                    f"got {n_in}"
                )
            out_shape = (layer.fc.out_features,)
        else:  # pragma: no cover - guarded by LayerSpec
            raise ShapeError(f"layer {layer.id}: unknown kind {layer.kind}")

        shapes[layer.id] = out_shape
        prev_shape = out_shape
        prev_id = layer.id
    return shapes


@dataclass
class TapPoint:
    """Captured intermediates at one layer during a forward pass.

    ``response`` is the output rearranged as (positions x channels) rows,
    aligned with im2col row order; ``patches`` (conv layers only) is the
    im2col matrix of the layer's input.
    """

    output: np.ndarray
    response: np.ndarray
    patches: np.ndarray | None = None


def _conv_forward(conv: ConvWeights, x: np.ndarray, want_patches: bool):
    c, h, w = x.shape
    h_out, w_out = conv.out_size(h, w)
    per_group_in = conv.c_in // conv.groups
    outputs = []
    full_patches = None
    if conv.groups == 1:
        full_patches = linalg.im2col(x, conv.k, conv.stride, conv.pad)
        resp = full_patches @ conv.weight_matrix()
    else:
        pieces = []
        for g in range(conv.groups):
            chunk = x[g * per_group_in : (g + 1) * per_group_in]
            patches = linalg.im2col(chunk, conv.k, conv.stride, conv.pad)
            pieces.append(patches)
            outputs.append(patches @ conv.group_matrix(g))
        resp = np.hstack(outputs)
        if want_patches:
            full_patches = np.hstack(pieces)
    if conv.bias is not None:
        resp = resp + conv.bias
    out = resp.T.reshape(conv.c_out, h_out, w_out)
    return out, resp, (full_patches if want_patches else None)


def _pool_forward(kind: str, pool: PoolParams, x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    h_out, w_out = pool.out_size(h, w)
    fill = -np.inf if kind == "maxpool" else 0.0
    padded = np.full((c, h + 2 * pool.pad, w + 2 * pool.pad), fill)
    padded[:, pool.pad : pool.pad + h, pool.pad : pool.pad + w] = x
    windows = np.empty((pool.k * pool.k, c, h_out, w_out))
    idx = 0
    for ki in range(pool.k):
        for kj in range(pool.k):
            windows[idx] = padded[
                :,
                ki : ki + pool.stride * h_out : pool.stride,
                kj : kj + pool.stride * w_out : pool.stride,
            ]
            idx += 1
    if kind == "maxpool":
        return windows.max(axis=0)
    return windows.mean(axis=0)


def forward(
    net: NetworkSpec,
    x,
    taps: set[str] | None = None,
    stop_after: str | None = None,
):
    """Run the network on one C x H x W input.

    Returns the final output, or ``(output, tap_points)`` when ``taps`` names
    layers to record. With ``stop_after`` execution halts after that layer
    and its output is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ShapeError(f"input shape {x.shape} != network input {net.input_shape}")
    taps = taps or set()
    recorded: dict[str, TapPoint] = {}
    outputs: dict[str, np.ndarray] = {}
    current = x
    prev_id = None
    for layer in net.layers:
        in_id = layer.input if layer.input is not None else prev_id
        value = current if in_id is None else outputs[in_id]

        if layer.kind == "conv":
            if value.shape[0] != layer.conv.c_in:
                raise ShapeError(
                    f"layer {layer.id}: expects {layer.conv.c_in} channels, "
                    f"got {value.shape[0]}"
                )
            out, resp, patches = _conv_forward(
                layer.conv, value, want_patches=layer.id in taps
            )
            if layer.id in taps:
                recorded[layer.id] = TapPoint(output=out, response=resp, patches=patches)
        else:
            if layer.kind == "relu":
                out = np.maximum(value, 0.0)
            elif layer.kind in ("maxpool", "avgpool"):
                out = _pool_forward(layer.kind, layer.pool, value)
            elif layer.kind == "add":
                other = outputs.get(layer.source)
                if other is None or other.shape != value.shape:
                    raise ShapeError(f"layer {layer.id}: bad add source {layer.source!r}")
                out = value + other
            elif layer.kind == "fc":
                flat = value.reshape(-1)
                out = layer.fc.weights @ flat
                if layer.fc.bias is not None:
                    out = out + layer.fc.bias
            elif layer.kind == "channel_affine":
                aff = layer.affine
                out = value * aff.scale[:, None, None] + aff.shift[:, None, None]
            else:  # pragma: no cover
                raise ShapeError(f"layer {layer.id}: unknown kind {layer.kind}")
            if layer.id in taps:
                resp = out.reshape(out.shape[0], -1).T if out.ndim == 3 else out[None, :]
                recorded[layer.id] = TapPoint(output=out, response=resp)

        outputs[layer.id] = out
        current = out
        prev_id = layer.id
        if stop_after is not None and layer.id == stop_after:
            break
    if taps:
        return current, recorded
    return current


def flops_of_layer(conv: ConvWeights, out_h: int, out_w: int) -> int:
    """FLOPs of one conv layer: 2 * (c_in/groups) * k^2 * c_out * out_h * out_w."""
    return 2 * (conv.c_in // conv.groups) * conv.k * conv.k * conv.c_out * out_h * out_w


def flops_of_fc(fc: FcParams) -> int:
    return 2 * fc.in_features * fc.out_features


def network_flops(net: NetworkSpec) -> tuple[int, dict[str, int]]:
    """Total FLOPs and a per-layer breakdown (conv and fc layers only)."""
    shapes = propagate_shapes(net)
    per_layer: dict[str, int] = {}
    for layer in net.layers:
        if layer.kind == "conv":
            _, h_out, w_out = shapes[layer.id]
            per_layer[layer.id] = flops_of_layer(layer.conv, h_out, w_out)
        elif layer.kind == "fc":
            per_layer[layer.id] = flops_of_fc(layer.fc)
    return sum(per_layer.values()), per_layer


def flops_ratio_fraction(c_out: int, k: int, n: int) -> Fraction:
    """Exact decomposed-to-original FLOPs ratio n/c_out + 1/k^2 as a Fraction."""
    return Fraction(n, c_out) + Fraction(1, k * k)


def flops_ratio_decomposed(c_in: int, c_out: int, k: int, n: int) -> float:
    """FLOPs ratio of the (group conv, pointwise) pair relative to the
    original layer. Equals flops(D) + flops(P) over flops(original) exactly.

    Warns when the ratio is >= 1 (the decomposition would not compress).
    """
    if not 1 <= n <= c_in:
        raise ValueError(f"n must be in [1, c_in={c_in}], got {n}")
    if c_in % n:
        raise ValueError(f"n={n} must divide c_in={c_in}")
    ratio = flops_ratio_fraction(c_out, k, n)
    if ratio >= 1:
        warnings.warn(
            f"decomposition with n={n}, c_out={c_out}, k={k} is non-compressing "
            f"(ratio {float(ratio):.3f})",
            UserWarning,
            stacklevel=2,
        )
    return float(ratio)


def clone_network(net: NetworkSpec) -> NetworkSpec:
    """Deep-enough copy: layer records are fresh, arrays are copied."""
    new_layers = []
    for layer in net.layers:
        conv = None
        if layer.conv is not None:
            conv = replace(
                layer.conv,
                weights=None if layer.conv.weights is None else layer.conv.weights.copy(),
                bias=None if layer.conv.bias is None else layer.conv.bias.copy(),
            )
        fc = None
        if layer.fc is not None:
            fc = replace(
                layer.fc,
                weights=None if layer.fc.weights is None else layer.fc.weights.copy(),
                bias=None if layer.fc.bias is None else layer.fc.bias.copy(),
            )
        affine = None
        if layer.affine is not None:
            affine = replace(
                layer.affine,
                scale=None if layer.affine.scale is None else layer.affine.scale.copy(),
                shift=None if layer.affine.shift is None else layer.affine.shift.copy(),
            )
        new_layers.append(
            replace(layer, conv=conv, fc=fc, affine=affine, meta=dict(layer.meta))
        )
    return NetworkSpec(name=net.name, input_shape=net.input_shape, layers=new_layers)
