"""Decompose a regular convolution into a filter-group + pointwise pair.

The weight matrix W of an ungrouped k x k convolution, in im2col ordering,
has shape (c_in * k^2) x c_out. Splitting its rows into c_in / n channel
blocks gives sub-matrices W_i of shape (n * k^2) x c_out; truncating each to
its best rank-n approximation D_i @ P_i^T and assembling the D_i block-
diagonally yields

    W  ~=  D @ P,

where D is realized by a group convolution (c_in filters of n x k x k,
c_in / n groups, original stride and padding) and P by a 1 x 1 convolution
(c_in -> c_out, stride 1, no padding) that also carries the original bias.
No nonlinearity sits between the two layers.

Singular values are absorbed into D (D_i = U_i * sigma, P_i = V_i); this
split is fixed so serialized decompositions stay portable and P stays
well conditioned for response reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import DecompositionError
from .model import ConvWeights, LayerSpec, NetworkSpec, clone_network


def _divisors(value: int) -> list[int]:
    return [d for d in range(1, value + 1) if value % d == 0]


def partition_blocks(w: ConvWeights, n: int) -> list[np.ndarray]:
    """Split the layer's weight matrix into c_in / n row blocks of n*k^2 rows.

    Stacking the blocks vertically reproduces the weight matrix exactly.
    """
    if w.groups != 1:
        raise DecompositionError("only ungrouped layers can be partitioned")
    if w.weights is None:
        raise DecompositionError("layer has no materialized weights")
    if not 1 <= n <= w.c_in or w.c_in % n:
        raise DecompositionError(
            f"n={n} must divide c_in={w.c_in}; valid choices: {_divisors(w.c_in)}"
        )
    matrix = w.weight_matrix()  # (c_in * k^2) x c_out
    rows_per_block = n * w.k * w.k
    return [
        matrix[i * rows_per_block : (i + 1) * rows_per_block]
        for i in range(w.c_in // n)
    ]


@dataclass
class GroupDecomposition:
    """The (D, P) layer pair replacing one convolution.

    ``d_layer``: group conv, c_in -> c_in, kernel k, c_in/n groups, original
    stride/pad. ``p_layer``: 1x1 conv, c_in -> c_out, carrying the bias.
    ``block_singular_values`` holds the full descending spectrum of every
    block; ``block_truncation_errors[i]`` equals
    sqrt(sum of discarded sigma^2) for block i.
    """

    n: int
    d_layer: ConvWeights
    p_layer: ConvWeights
    block_singular_values: list[np.ndarray]
    block_truncation_errors: np.ndarray

    @property
    def total_truncation_error(self) -> float:
        return float(np.sqrt(np.sum(self.block_truncation_errors**2)))

    def d_matrix(self) -> np.ndarray:
        """Assembled block-diagonal D, shape (c_in * k^2) x c_in."""
        return group_conv_matrix(self.d_layer)

    def p_matrix(self) -> np.ndarray:
        """Assembled P, shape c_in x c_out."""
        return self.p_layer.weight_matrix()

    def composed_matrix(self) -> np.ndarray:
        """D @ P, same shape as the original weight matrix."""
        return self.d_matrix() @ self.p_matrix()


def decompose_layer(
    w: ConvWeights, n: int, force_pointwise: bool = False
) -> GroupDecomposition:
    """Best rank-n per-block factorization of an ungrouped convolution.

    1x1 layers are rejected by default: with k == 1 the structure reduces to
    a plain channel SVD and the FLOPs ratio n/c_out + 1 never compresses.
    Pass ``force_pointwise=True`` to decompose them anyway.
    """
    if w.k == 1 and not force_pointwise:
        raise DecompositionError(
            "refusing to decompose a 1x1 convolution (no compression); "
            "pass force_pointwise=True to override"
        )
    blocks = partition_blocks(w, n)
    k, c_in, c_out = w.k, w.c_in, w.c_out
    n_blocks = len(blocks)

    d_weights = np.zeros((c_in, n, k, k))
    p_matrix = np.zeros((c_in, c_out))
    spectra: list[np.ndarray] = []
    errors = np.zeros(n_blocks)
    for i, block in enumerate(blocks):
        res = linalg.svd(block)
        kept = min(n, res.rank)
        trunc = res.truncate(kept)
        d_block = trunc.u * trunc.singular_values  # (n*k^2, kept)
        p_block = trunc.vt  # (kept, c_out)
        if kept < n:
            # Rank bound min(n*k^2, c_out) fell below n; pad with zeros.
            d_block = np.hstack([d_block, np.zeros((d_block.shape[0], n - kept))])
            p_block = np.vstack([p_block, np.zeros((n - kept, c_out))])
        # Column m of d_block is the filter for output channel i*n + m.
        d_weights[i * n : (i + 1) * n] = d_block.T.reshape(n, n, k, k)
        p_matrix[i * n : (i + 1) * n] = p_block
        spectra.append(res.singular_values)
        errors[i] = float(np.sqrt(np.sum(res.singular_values[n:] ** 2)))

    d_layer = ConvWeights(
        c_in=c_in,
        c_out=c_in,
        k=k,
        groups=c_in // n,
        stride=w.stride,
        pad=w.pad,
        weights=d_weights,
        bias=None,
    )
    p_layer = ConvWeights(
        c_in=c_in,
        c_out=c_out,
        k=1,
        groups=1,
        stride=1,
        pad=0,
        weights=p_matrix.T.reshape(c_out, c_in, 1, 1),
        bias=None if w.bias is None else w.bias.copy(),
    )
    return GroupDecomposition(
        n=n,
        d_layer=d_layer,
        p_layer=p_layer,
        block_singular_values=spectra,
        block_truncation_errors=errors,
    )


def group_conv_matrix(conv: ConvWeights) -> np.ndarray:
    """Block-diagonal matrix form of a group convolution, shape
    (c_in * k^2) x c_out; the off-block entries are structurally zero."""
    if conv.weights is None:
        raise DecompositionError("layer has no materialized weights")
    n_in = conv.c_in // conv.groups
    k = conv.k
    out = np.zeros((conv.c_in * k * k, conv.c_out))
    per_out = conv.c_out // conv.groups
    rows = n_in * k * k
    for g in range(conv.groups):
        block = conv.weights[g * per_out : (g + 1) * per_out]
        out[g * rows : (g + 1) * rows, g * per_out : (g + 1) * per_out] = block.reshape(
            per_out, -1
        ).T
    return out


def decomposed_jacobian_rank(c_in: int, c_out: int, n: int) -> int:
    """Rank of the assembled D @ P with full-rank blocks: min(c_in, c_out),
    independent of n."""
    if c_in < 1 or c_out < 1 or n < 1:
        raise ValueError("dimensions must be positive")
    return min(c_in, c_out)


def d_layer_id(layer_id: str) -> str:
    return f"{layer_id}.d"


def p_layer_id(layer_id: str) -> str:
    return f"{layer_id}.p"


def decompose_network(
    net: NetworkSpec,
    layer_ranks: dict[str, int],
    force_pointwise: bool = False,
) -> tuple[NetworkSpec, dict[str, GroupDecomposition]]:
    """Replace every conv named in ``layer_ranks`` by its (D, P) pair.

    The D layer keeps the original layer's stage and input; the P layer is
    named ``<id>.p`` and all later references to the original id are
    redirected to it. Provenance (source id and n) is recorded on both
    layers.
    """
    missing = [lid for lid in layer_ranks if lid not in {l.id for l in net.layers}]
    if missing:
        raise DecompositionError(f"layers not in network: {missing}")

    new_layers: list[LayerSpec] = []
    decompositions: dict[str, GroupDecomposition] = {}
    renamed: dict[str, str] = {}

    def remap(ref: str | None) -> str | None:
        return renamed.get(ref, ref) if ref is not None else None

    for layer in clone_network(net).layers:
        layer.input = remap(layer.input)
        layer.source = remap(layer.source)
        if layer.kind != "conv" or layer.id not in layer_ranks:
            new_layers.append(layer)
            continue
        n = layer_ranks[layer.id]
        try:
            decomp = decompose_layer(layer.conv, n, force_pointwise=force_pointwise)
        except DecompositionError as exc:
            raise DecompositionError(f"layer {layer.id}: {exc}") from exc
        decompositions[layer.id] = decomp
        provenance = {"decomposed_from": layer.id, "rank_n": n}
        new_layers.append(
            LayerSpec(
                id=d_layer_id(layer.id),
                kind="conv",
                stage=layer.stage,
                input=layer.input,
                conv=decomp.d_layer,
                meta=dict(provenance),
            )
        )
        new_layers.append(
            LayerSpec(
                id=p_layer_id(layer.id),
                kind="conv",
                stage=layer.stage,
                conv=decomp.p_layer,
                meta=dict(provenance),
            )
        )
        renamed[layer.id] = p_layer_id(layer.id)

    return (
        NetworkSpec(name=net.name, input_shape=net.input_shape, layers=new_layers),
        decompositions,
    )
