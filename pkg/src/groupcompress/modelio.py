"""Model serialization: JSON manifest plus a raw float32 weight blob.

Format (version 1)
------------------
``model.json``::

    {
      "format_version": 1,
      "name": "...",
      "input_shape": [C, H, W],
      "blob": "model.bin",
      "layers": [ ... ]
    }

Each layer object carries ``id``, ``kind`` and optionally ``stage`` and
``input`` (the id of the layer it reads; omitted means the previous layer).
Kind-specific fields:

* conv: ``c_in, c_out, k, groups, stride, pad, weights, bias`` where
  ``weights``/``bias`` are ``{"offset": bytes, "length": bytes}`` into the
  blob (bias may be null). Optional provenance: ``decomposed_from``,
  ``rank_n``.
* maxpool / avgpool: ``k, stride, pad``.
* add: ``source`` (id of the joined layer).
* fc: ``in_features, out_features, weights, bias``.
* channel_affine: ``channels, scale, shift``.

The blob is little-endian float32, tensors in C order; conv weights are
(c_out, c_in/groups, k, k), fc weights (out_features, in_features). Offsets
and lengths are in bytes and must be 4-byte aligned.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ModelFormatError
from .model import (
    AffineParams,
    ConvWeights,
    FcParams,
    LayerSpec,
    NetworkSpec,
    PoolParams,
    propagate_shapes,
)

FORMAT_VERSION = 1


class _BlobWriter:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.offset = 0

    def put(self, array: np.ndarray | None) -> dict | None:
        if array is None:
            return None
        data = np.ascontiguousarray(array, dtype="<f4").tobytes()
        entry = {"offset": self.offset, "length": len(data)}
        self.chunks.append(data)
        self.offset += len(data)
        return entry

    def bytes(self) -> bytes:
        return b"".join(self.chunks)


class _BlobReader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.path = path

    def get(self, entry, shape, field: str) -> np.ndarray | None:
        if entry is None:
            return None
        try:
            offset, length = int(entry["offset"]), int(entry["length"])
        except (TypeError, KeyError) as exc:
            raise ModelFormatError(f"{field}: malformed blob reference") from exc
        count = int(np.prod(shape))
        if length != 4 * count:
            raise ModelFormatError(
                f"{field}: blob length {length} != {4 * count} expected for shape {shape}"
            )
        if offset < 0 or offset + length > len(self.raw):
            raise ModelFormatError(f"{field}: blob slice out of range")
        flat = np.frombuffer(self.raw, dtype="<f4", count=count, offset=offset)
        return flat.astype(np.float64).reshape(shape)


def _layer_to_json(layer: LayerSpec, blob: _BlobWriter) -> dict:
    obj: dict = {"id": layer.id, "kind": layer.kind}
    if layer.stage is not None:
        obj["stage"] = layer.stage
    if layer.input is not None:
        obj["input"] = layer.input
    if layer.kind == "conv":
        conv = layer.conv
        if conv.weights is None:
            raise ModelFormatError(
                f"layer {layer.id}: cannot serialize a conv without weights"
            )
        obj.update(
            c_in=conv.c_in,
            c_out=conv.c_out,
            k=conv.k,
            groups=conv.groups,
            stride=conv.stride,
            pad=conv.pad,
            weights=blob.put(conv.weights),
            bias=blob.put(conv.bias),
        )
        for key in ("decomposed_from", "rank_n"):
            if key in layer.meta:
                obj[key] = layer.meta[key]
    elif layer.kind in ("maxpool", "avgpool"):
        obj.update(k=layer.pool.k, stride=layer.pool.stride, pad=layer.pool.pad)
    elif layer.kind == "add":
        obj["source"] = layer.source
    elif layer.kind == "fc":
        fc = layer.fc
        if fc.weights is None:
            raise ModelFormatError(f"layer {layer.id}: cannot serialize fc without weights")
        obj.update(
            in_features=fc.in_features,
            out_features=fc.out_features,
            weights=blob.put(fc.weights),
            bias=blob.put(fc.bias),
        )
    elif layer.kind == "channel_affine":
        aff = layer.affine
        obj.update(
            channels=aff.channels,
            scale=blob.put(aff.scale),
            shift=blob.put(aff.shift),
        )
    return obj


def _require(obj: dict, field: str, layer_id: str):
    if field not in obj:
        raise ModelFormatError(f"layer {layer_id}: missing field {field!r}")
    return obj[field]


def _layer_from_json(obj: dict, blob: _BlobReader) -> LayerSpec:
    layer_id = obj.get("id")
    if not isinstance(layer_id, str) or not layer_id:
        raise ModelFormatError("layer: missing or invalid field 'id'")
    kind = _require(obj, "kind", layer_id)
    stage = obj.get("stage")
    input_ = obj.get("input")
    meta = {}

    conv = pool = fc = affine = None
    source = None
    if kind == "conv":
        c_in = int(_require(obj, "c_in", layer_id))
        c_out = int(_require(obj, "c_out", layer_id))
        k = int(_require(obj, "k", layer_id))
        groups = int(obj.get("groups", 1))
        weights = blob.get(
            _require(obj, "weights", layer_id),
            (c_out, c_in // groups if groups else 0, k, k),
            f"layer {layer_id} weights",
        )
        bias = blob.get(obj.get("bias"), (c_out,), f"layer {layer_id} bias")
        conv = ConvWeights(
            c_in=c_in,
            c_out=c_out,
            k=k,
            groups=groups,
            stride=int(obj.get("stride", 1)),
            pad=int(obj.get("pad", 0)),
            weights=weights,
            bias=bias,
        )
        for key in ("decomposed_from", "rank_n"):
            if key in obj:
                meta[key] = obj[key]
    elif kind == "relu":
        pass
    elif kind in ("maxpool", "avgpool"):
        pool = PoolParams(
            k=int(_require(obj, "k", layer_id)),
            stride=int(_require(obj, "stride", layer_id)),
            pad=int(obj.get("pad", 0)),
        )
    elif kind == "add":
        source = _require(obj, "source", layer_id)
    elif kind == "fc":
        in_features = int(_require(obj, "in_features", layer_id))
        out_features = int(_require(obj, "out_features", layer_id))
        fc = FcParams(
            in_features=in_features,
            out_features=out_features,
            weights=blob.get(
                _require(obj, "weights", layer_id),
                (out_features, in_features),
                f"layer {layer_id} weights",
            ),
            bias=blob.get(obj.get("bias"), (out_features,), f"layer {layer_id} bias"),
        )
    elif kind == "channel_affine":
        channels = int(_require(obj, "channels", layer_id))
        affine = AffineParams(
            channels=channels,
            scale=blob.get(
                _require(obj, "scale", layer_id), (channels,), f"layer {layer_id} scale"
            ),
            shift=blob.get(
                _require(obj, "shift", layer_id), (channels,), f"layer {layer_id} shift"
            ),
        )
    else:
        raise ModelFormatError(f"layer {layer_id}: unknown kind {kind!r}")

    try:
        return LayerSpec(
            id=layer_id,
            kind=kind,
            stage=stage,
            input=input_,
            source=source,
            conv=conv,
            pool=pool,
            fc=fc,
            affine=affine,
            meta=meta,
        )
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc


def save_model(net: NetworkSpec, manifest_path) -> Path:
    """Write ``<manifest_path>`` and its sibling ``.bin`` blob.

    The blob file name is the manifest name with a ``.bin`` suffix; writing
    is deterministic (same network -> identical bytes).
    """
    manifest_path = Path(manifest_path)
    blob_name = manifest_path.with_suffix(".bin").name
    blob = _BlobWriter()
    layers = [_layer_to_json(layer, blob) for layer in net.layers]
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": net.name,
        "input_shape": list(net.input_shape),
        "blob": blob_name,
        "layers": layers,
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    with open(manifest_path.parent / blob_name, "wb") as fh:
        fh.write(blob.bytes())
    return manifest_path


def load_model(manifest_path) -> NetworkSpec:
    """Load and validate a model; shape propagation runs as a consistency check."""
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ModelFormatError(f"manifest not found: {manifest_path}")
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"manifest is not valid JSON: {exc}") from exc

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported format_version {version!r} (expected {FORMAT_VERSION})"
        )
    for field in ("input_shape", "blob", "layers"):
        if field not in manifest:
            raise ModelFormatError(f"manifest: missing field {field!r}")
    if not manifest["layers"]:
        raise ModelFormatError("manifest: no layers")
    input_shape = manifest["input_shape"]
    if len(input_shape) != 3 or any(int(v) < 1 for v in input_shape):
        raise ModelFormatError(f"manifest: bad input_shape {input_shape!r}")

    blob_path = manifest_path.parent / manifest["blob"]
    try:
        raw = blob_path.read_bytes()
    except FileNotFoundError:
        raise ModelFormatError(f"weight blob not found: {blob_path}")
    reader = _BlobReader(raw, str(blob_path))

    layers = [_layer_from_json(obj, reader) for obj in manifest["layers"]]
    try:
        net = NetworkSpec(
            name=manifest.get("name", manifest_path.stem),
            input_shape=tuple(int(v) for v in input_shape),
            layers=layers,
        )
        propagate_shapes(net)
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc
    return net
