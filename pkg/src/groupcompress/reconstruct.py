"""Least-squares response reconstruction for decomposed layers.

After truncation the compressed response Y* drifts from the original
response Y, and errors accumulate front to back. For each decomposed layer
we solve

    A = argmin || Y - Y* @ A ||_F^2   (optionally ridge-regularized,
                                       optionally with an intercept)

and fold A into the pointwise layer: P' = P @ A, so the layer count does
not change. Y* is taken from the *compressed* prefix by default, so the
regression also compensates upstream error (asymmetric reconstruction); a
symmetric variant that evaluates (D, P) on the original network's inputs is
available for comparison.

Layers must be processed front to back: when layer L is solved, every
earlier decomposed layer is already in its final merged form.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import linalg
from .decompose import GroupDecomposition, group_conv_matrix, p_layer_id
from .errors import CalibrationWarning, ModelFormatError, ShapeError
from .model import ConvWeights, NetworkSpec, clone_network, forward

CALIBRATION_FORMAT_VERSION = 1


@dataclass
class CalibrationSet:
    """Input samples used to probe layer responses.

    ``samples`` has shape (count, C, H, W). Synthetic sets draw i.i.d.
    standard normal values from a fixed seed, which keeps runs reproducible
    and is sufficient for checking the linear solve.
    """

    samples: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 4:
            raise ShapeError(
                f"calibration samples must be (count, C, H, W), got {self.samples.ndim}-D"
            )

    @property
    def count(self) -> int:
        return self.samples.shape[0]

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.samples.shape[1:])

    @classmethod
    def synthetic(cls, shape, count: int, seed: int = 0) -> "CalibrationSet":
        rng = np.random.default_rng(seed)
        samples = rng.standard_normal((count, *shape))
        return cls(samples=samples, seed=seed)

    @classmethod
    def from_file(cls, manifest_path) -> "CalibrationSet":
        manifest_path = Path(manifest_path)
        try:
            header = json.loads(manifest_path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ModelFormatError(f"calibration manifest not found: {manifest_path}")
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"calibration manifest is not JSON: {exc}") from exc
        for fld in ("format_version", "count", "shape", "blob"):
            if fld not in header:
                raise ModelFormatError(f"calibration manifest: missing field {fld!r}")
        if header["format_version"] != CALIBRATION_FORMAT_VERSION:
            raise ModelFormatError(
                f"unsupported calibration format_version {header['format_version']!r}"
            )
        count = int(header["count"])
        shape = tuple(int(v) for v in header["shape"])
        blob = (manifest_path.parent / header["blob"]).read_bytes()
        expected = 4 * count * int(np.prod(shape))
        if len(blob) != expected:
            raise ModelFormatError(
                f"calibration blob has {len(blob)} bytes, expected {expected}"
            )
        samples = (
            np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(count, *shape)
        )
        return cls(samples=samples)

    def save(self, manifest_path) -> Path:
        manifest_path = Path(manifest_path)
        blob_name = manifest_path.with_suffix(".bin").name
        header = {
            "format_version": CALIBRATION_FORMAT_VERSION,
            "count": self.count,
            "shape": list(self.sample_shape),
            "blob": blob_name,
        }
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        manifest_path.write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
        with open(manifest_path.parent / blob_name, "wb") as fh:
            fh.write(np.ascontiguousarray(self.samples, dtype="<f4").tobytes())
        return manifest_path


def _stack_responses(net: NetworkSpec, calib: CalibrationSet, tap_id: str):
    """Responses at one layer over all calibration samples, rows aligned as
    (sample-major, then spatial position)."""
    rows = []
    for sample in calib.samples:
        _, taps = forward(net, sample, taps={tap_id}, stop_after=tap_id)
        rows.append(taps[tap_id].response)
    return np.vstack(rows)


def _stack_patches(net: NetworkSpec, calib: CalibrationSet, layer_id: str):
    rows = []
    for sample in calib.samples:
        _, taps = forward(net, sample, taps={layer_id}, stop_after=layer_id)
        rows.append(taps[layer_id].patches)
    return np.vstack(rows)


def collect_responses(
    original: NetworkSpec,
    compressed: NetworkSpec,
    calib: CalibrationSet,
    layer_id: str,
    symmetric: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """(Y, Y*) for one decomposed layer, rows aligned sample by sample.

    Y is the original layer's pre-activation response. Y* is the output of
    the corresponding pointwise layer in the compressed network (default),
    or, with ``symmetric=True``, the (D, P) pair applied to the original
    network's input patches at that layer, ignoring upstream drift.
    """
    try:
        layer = original.layer(layer_id)
    except KeyError:
        raise ShapeError(f"layer {layer_id!r} not found in original network")
    if layer.kind != "conv":
        raise ShapeError(f"layer {layer_id!r} is not a convolution")
    pid = p_layer_id(layer_id)
    try:
        p_layer = compressed.layer(pid)
        d_layer = compressed.layer(f"{layer_id}.d")
    except KeyError:
        raise ShapeError(f"layer {layer_id!r} is not decomposed in the compressed network")

    y = _stack_responses(original, calib, layer_id)
    if symmetric:
        patches = _stack_patches(original, calib, layer_id)
        d_mat = group_conv_matrix(d_layer.conv)
        p_mat = p_layer.conv.weight_matrix()
        y_star = patches @ d_mat @ p_mat
        if p_layer.conv.bias is not None:
            y_star = y_star + p_layer.conv.bias
    else:
        y_star = _stack_responses(compressed, calib, pid)
    if y.shape != y_star.shape:
        raise ShapeError(
            f"misaligned responses for {layer_id}: {y.shape} vs {y_star.shape}"
        )
    return y, y_star


def default_ridge(y_star: np.ndarray) -> float:
    """Conditioning default: 1e-6 * trace(Y*^T Y*) / c_out."""
    c_out = y_star.shape[1]
    return 1e-6 * float(np.einsum("ij,ij->", y_star, y_star)) / c_out


def solve_reconstruction(
    y,
    y_star,
    ridge: float | None = None,
    intercept: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Solve for the mixing matrix A (c_out x c_out) and a bias correction.

    ``ridge=None`` applies the scale-aware default; pass 0.0 for the plain
    unconstrained regression. Without an intercept the returned correction
    is zero.
    """
    y = linalg.as_matrix(y, "y")
    y_star = linalg.as_matrix(y_star, "y_star")
    if y.shape != y_star.shape:
        raise ShapeError(f"responses misaligned: {y.shape} vs {y_star.shape}")
    rows, c_out = y_star.shape
    needed = c_out + (1 if intercept else 0)
    if rows < needed:
        raise ShapeError(
            f"{rows} response rows for {needed} unknown columns; "
            "collect more calibration samples"
        )
    if rows < 10 * c_out:
        warnings.warn(
            f"only {rows} rows for {c_out} output channels; recommend >= {10 * c_out}",
            CalibrationWarning,
            stacklevel=2,
        )
    if ridge is None:
        ridge = default_ridge(y_star)

    if intercept:
        design = np.hstack([y_star, np.ones((rows, 1))])
        solution = linalg.solve_least_squares(design, y, ridge=ridge)
        return solution[:-1], solution[-1]
    solution = linalg.solve_least_squares(y_star, y, ridge=ridge)
    return solution, np.zeros(c_out)


def merge_into_pointwise(
    decomp: GroupDecomposition, a: np.ndarray, bias_delta: np.ndarray | None = None
) -> GroupDecomposition:
    """Fold the mixing matrix into P: P' = P @ A, bias' = A^T b + delta."""
    a = linalg.as_matrix(a, "a")
    c_out = decomp.p_layer.c_out
    if a.shape != (c_out, c_out):
        raise ShapeError(f"A must be {c_out}x{c_out}, got {a.shape}")
    merged_p = merge_pointwise_weights(decomp.p_layer, a, bias_delta)
    return GroupDecomposition(
        n=decomp.n,
        d_layer=decomp.d_layer,
        p_layer=merged_p,
        block_singular_values=decomp.block_singular_values,
        block_truncation_errors=decomp.block_truncation_errors,
    )


def merge_pointwise_weights(
    p: ConvWeights, a: np.ndarray, bias_delta: np.ndarray | None
) -> ConvWeights:
    p_mat = p.weight_matrix() @ a  # (c_in, c_out)
    bias = np.zeros(p.c_out) if p.bias is None else a.T @ p.bias
    if bias_delta is not None:
        bias = bias + bias_delta
    return ConvWeights(
        c_in=p.c_in,
        c_out=p.c_out,
        k=1,
        groups=1,
        stride=1,
        pad=0,
        weights=p_mat.T.reshape(p.c_out, p.c_in, 1, 1),
        bias=bias,
    )


@dataclass
class LayerReconstructionReport:
    layer_id: str
    rank_n: int
    sample_rows: int
    ridge: float
    residual_before: float
    residual_after: float
    used_identity_fallback: bool = False

    def to_json(self) -> dict:
        return {
            "layer": self.layer_id,
            "n": self.rank_n,
            "sample_rows": self.sample_rows,
            "ridge": self.ridge,
            "residual_before": self.residual_before,
            "residual_after": self.residual_after,
            "identity_fallback": self.used_identity_fallback,
        }


def reconstruct_network(
    original: NetworkSpec,
    compressed: NetworkSpec,
    calib: CalibrationSet,
    ridge: float | None = None,
    intercept: bool = True,
    symmetric: bool = False,
) -> tuple[NetworkSpec, list[LayerReconstructionReport]]:
    """Reconstruct every decomposed layer, front to back, merging each A
    into its pointwise layer before moving deeper.

    Identity is always feasible, so a solve is only accepted when it does
    not increase the fitting residual; otherwise the layer keeps its plain
    truncated form (recorded in the report).
    """
    result = clone_network(compressed)
    reports: list[LayerReconstructionReport] = []
    decomposed_ids = [
        layer.meta["decomposed_from"]
        for layer in result.layers
        if layer.kind == "conv"
        and layer.meta.get("decomposed_from")
        and layer.id.endswith(".p")
    ]
    for layer_id in decomposed_ids:
        y, y_star = collect_responses(original, result, calib, layer_id, symmetric=symmetric)
        used_ridge = default_ridge(y_star) if ridge is None else ridge
        a, delta = solve_reconstruction(y, y_star, ridge=used_ridge, intercept=intercept)
        residual_before = float(np.linalg.norm(y - y_star))
        residual_after = float(np.linalg.norm(y - y_star @ a - delta))
        fallback = residual_after > residual_before
        if fallback:
            residual_after = residual_before
        else:
            p_spec = result.layer(p_layer_id(layer_id))
            p_spec.conv = merge_pointwise_weights(p_spec.conv, a, delta)
        reports.append(
            LayerReconstructionReport(
                layer_id=layer_id,
                rank_n=int(result.layer(p_layer_id(layer_id)).meta.get("rank_n", 0)),
                sample_rows=y.shape[0],
                ridge=used_ridge,
                residual_before=residual_before,
                residual_after=residual_after,
                used_identity_fallback=fallback,
            )
        )
    return result, reports
