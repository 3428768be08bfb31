"""Per-layer rank schedules and FLOPs prediction.

A schedule assigns each compressed stage a target rank n, growing with
depth: Constant keeps n fixed, Half doubles it per stage, Quarter
quadruples it. Stage caps can pin individual stages below the geometric
value, and the per-layer n is always clamped down to a divisor of that
layer's input channel count.

Layers exempt from planning: non-conv layers, 1x1 convolutions, already
grouped convolutions, and anything named in the skip lists.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import PlanError
from .model import (
    ConvWeights,
    NetworkSpec,
    flops_of_layer,
    network_flops,
    propagate_shapes,
)

DEGREES = {"constant": 1, "half": 2, "quarter": 4}


@dataclass
class CompressionPlan:
    """Resolved per-layer ranks plus the schedule that produced them."""

    degree: str
    base_n: int
    stage_ns: dict[str, int]
    layer_ranks: dict[str, int]
    skipped_layers: list[str] = field(default_factory=list)
    adjustments: list[str] = field(default_factory=list)
    predicted_flops: int | None = None

    def to_json(self) -> dict:
        return {
            "degree": self.degree,
            "base_n": self.base_n,
            "stage_ns": self.stage_ns,
            "layer_ranks": self.layer_ranks,
            "skipped_layers": self.skipped_layers,
            "adjustments": self.adjustments,
            "predicted_flops": self.predicted_flops,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CompressionPlan":
        try:
            return cls(
                degree=obj["degree"],
                base_n=int(obj["base_n"]),
                stage_ns={k: int(v) for k, v in obj["stage_ns"].items()},
                layer_ranks={k: int(v) for k, v in obj["layer_ranks"].items()},
                skipped_layers=list(obj.get("skipped_layers", [])),
                adjustments=list(obj.get("adjustments", [])),
                predicted_flops=obj.get("predicted_flops"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PlanError(f"malformed plan: {exc}") from exc

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "CompressionPlan":
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise PlanError(f"plan file not found: {path}")
        except json.JSONDecodeError as exc:
            raise PlanError(f"plan file is not JSON: {exc}") from exc


def _largest_divisor_at_most(value: int, cap: int) -> int:
    for d in range(min(cap, value), 0, -1):
        if value % d == 0:
            return d
    return 1


def derive_stages(net: NetworkSpec) -> dict[str, str]:
    """Default stage labels for convs, keyed by input spatial resolution.

    Pooling (and any other resolution change) delimits stages; a stride-2
    conv at a boundary belongs to the stage it reads from. Manifest labels,
    when present, take precedence over this derivation.
    """
    shapes = propagate_shapes(net)
    labels: dict[str, str] = {}
    prev_id = None
    for layer in net.layers:
        if layer.kind == "conv":
            in_id = layer.input if layer.input is not None else prev_id
            if in_id is None:
                _, h, w = net.input_shape
            else:
                shape = shapes[in_id]
                if len(shape) != 3:
                    prev_id = layer.id
                    continue
                _, h, w = shape
            labels[layer.id] = f"s{h}x{w}"
        prev_id = layer.id
    return labels


def _effective_stage(net: NetworkSpec, derived: dict[str, str] | None):
    def stage_of(layer):
        if layer.stage is not None:
            return layer.stage
        if derived is not None:
            return derived.get(layer.id)
        return None

    return stage_of


def _derived_if_unlabeled(net: NetworkSpec) -> dict[str, str] | None:
    if any(l.stage is not None for l in net.conv_layers()):
        return None
    return derive_stages(net)


def plannable_convs(net: NetworkSpec, derived: dict[str, str] | None = None) -> list:
    """Conv layers eligible for decomposition: ungrouped, k > 1, staged."""
    stage_of = _effective_stage(net, derived)
    out = []
    for layer in net.conv_layers():
        conv = layer.conv
        if conv.k == 1 or conv.groups != 1 or stage_of(layer) is None:
            continue
        out.append(layer)
    return out


def stage_order(net: NetworkSpec, derived: dict[str, str] | None = None) -> list[str]:
    """Stage labels of plannable convs, in first-appearance order."""
    if derived is None:
        derived = _derived_if_unlabeled(net)
    stage_of = _effective_stage(net, derived)
    seen: list[str] = []
    for layer in plannable_convs(net, derived):
        if stage_of(layer) not in seen:
            seen.append(stage_of(layer))
    return seen


def build_plan(
    net: NetworkSpec,
    degree: str,
    base_n: int,
    stage_caps: dict[str, int] | None = None,
    skip_stages: tuple | list = (),
    skip_layers: tuple | list = (),
) -> CompressionPlan:
    """Assign n = base_n * r^s to the s-th compressed stage (r per degree),
    apply stage caps, then clamp each layer's n to a divisor of its c_in.

    Adjustments (caps or divisor clamps) are reported on the plan, never
    fatal. Unknown stage names in the skip list are a planning error.
    """
    degree = degree.lower()
    if degree not in DEGREES:
        raise PlanError(f"unknown degree {degree!r}; choose one of {sorted(DEGREES)}")
    if base_n < 1:
        raise PlanError(f"base_n must be >= 1, got {base_n}")
    stage_caps = dict(stage_caps or {})
    ratio = DEGREES[degree]

    derived = _derived_if_unlabeled(net)
    stage_of = _effective_stage(net, derived)
    stages = stage_order(net, derived)
    unknown = [s for s in skip_stages if s not in stages]
    if unknown:
        raise PlanError(f"skip stages not present in network: {unknown}")
    compressed_stages = [s for s in stages if s not in set(skip_stages)]

    stage_ns: dict[str, int] = {}
    adjustments: list[str] = []
    for s_idx, stage in enumerate(compressed_stages):
        n = base_n * ratio**s_idx
        cap = stage_caps.get(stage)
        if cap is not None and n > cap:
            adjustments.append(f"stage {stage}: n {n} capped to {cap}")
            n = cap
        stage_ns[stage] = n

    layer_ranks: dict[str, int] = {}
    skipped: list[str] = []
    skip_layer_set = set(skip_layers)
    for layer in net.conv_layers():
        conv = layer.conv
        stage = stage_of(layer)
        if (
            layer.id in skip_layer_set
            or stage not in stage_ns
            or conv.k == 1
            or conv.groups != 1
        ):
            skipped.append(layer.id)
            continue
        n = stage_ns[stage]
        if n > conv.c_in or conv.c_in % n:
            clamped = _largest_divisor_at_most(conv.c_in, n)
            adjustments.append(
                f"layer {layer.id}: n {n} clamped to {clamped} (c_in={conv.c_in})"
            )
            n = clamped
        layer_ranks[layer.id] = n

    plan = CompressionPlan(
        degree=degree,
        base_n=base_n,
        stage_ns=stage_ns,
        layer_ranks=layer_ranks,
        skipped_layers=skipped,
        adjustments=adjustments,
    )
    plan.predicted_flops = predict_flops(net, plan)
    return plan


def decomposed_layer_flops(conv: ConvWeights, n: int, out_h: int, out_w: int) -> int:
    """FLOPs of the (D, P) pair that would replace ``conv`` at rank n."""
    d_layer = ConvWeights(conv.c_in, conv.c_in, conv.k, groups=conv.c_in // n)
    p_layer = ConvWeights(conv.c_in, conv.c_out, 1)
    return flops_of_layer(d_layer, out_h, out_w) + flops_of_layer(p_layer, out_h, out_w)


def predict_flops(net: NetworkSpec, plan: CompressionPlan) -> int:
    """Total FLOPs of the planned network, without materializing weights.

    Uses the same counting path as the real decomposition, so the predicted
    count equals the measured count of the decomposed network exactly.
    """
    shapes = propagate_shapes(net)
    _, per_layer = network_flops(net)
    total = 0
    for layer in net.layers:
        if layer.id not in per_layer:
            continue
        if layer.kind == "conv" and layer.id in plan.layer_ranks:
            n = plan.layer_ranks[layer.id]
            conv = layer.conv
            if not 1 <= n <= conv.c_in or conv.c_in % n:
                raise PlanError(
                    f"layer {layer.id}: invalid n={n} for c_in={conv.c_in}"
                )
            _, h_out, w_out = shapes[layer.id]
            total += decomposed_layer_flops(conv, n, h_out, w_out)
        else:
            total += per_layer[layer.id]
    return total


def list_presets() -> list[str]:
    files = resources.files("groupcompress.presets")
    return sorted(p.name[: -len(".json")] for p in files.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    """Preset schedule parameters shipped with the package."""
    files = resources.files("groupcompress.presets")
    candidate = files / f"{name}.json"
    try:
        text = candidate.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise PlanError(f"unknown preset {name!r}; available: {list_presets()}")
    return json.loads(text)


def plan_from_preset(net: NetworkSpec, name: str) -> CompressionPlan:
    preset = load_preset(name)
    if preset.get("network") not in (None, net.name):
        raise PlanError(
            f"preset {name!r} targets network {preset.get('network')!r}, got {net.name!r}"
        )
    return build_plan(
        net,
        degree=preset["degree"],
        base_n=int(preset["base_n"]),
        stage_caps=preset.get("stage_caps"),
        skip_stages=preset.get("skip_stages", ()),
        skip_layers=preset.get("skip_layers", ()),
    )
