"""Command-line front end: inspect, plan, compress, analyze, gen-fixtures.

Exit codes: 0 success, 2 model/format error, 3 plan error, 4 numerical
failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decompose import decompose_network, group_conv_matrix, p_layer_id
from .degeneracy import (
    equal_flops_ranks,
    filter_correlation,
    jacobian_energy_curve,
    svd_strategy_matrix,
    write_correlation_csv,
    write_energy_csv,
    write_rank_report_csv,
)
from .errors import (
    DecompositionError,
    ModelFormatError,
    NumericalError,
    PlanError,
    ShapeError,
)
from .fixtures import BUILDERS
from .model import NetworkSpec, forward, network_flops, propagate_shapes
from .modelio import load_model, save_model
from .reconstruct import CalibrationSet, reconstruct_network
from .schedule import CompressionPlan, build_plan, list_presets, plan_from_preset

EXIT_OK = 0
EXIT_GENERIC = 1
EXIT_FORMAT = 2
EXIT_PLAN = 3
EXIT_NUMERIC = 4


@dataclass
class RunConfig:
    """Everything cmd_compress needs; mirrors the CLI flags."""

    model: Path
    out_dir: Path
    plan_path: Path | None = None
    preset: str | None = None
    degree: str | None = None
    base_n: int | None = None
    calib_path: Path | None = None
    calib_seed: int = 0
    calib_count: int = 128
    ridge: float | None = None
    reconstruct: bool = True
    intercept: bool = True
    symmetric: bool = False
    force_pointwise: bool = False


def _resolve_plan(net: NetworkSpec, config: RunConfig) -> CompressionPlan:
    if config.plan_path is not None:
        return CompressionPlan.load(config.plan_path)
    if config.preset is not None:
        return plan_from_preset(net, config.preset)
    if config.degree is not None and config.base_n is not None:
        return build_plan(net, config.degree, config.base_n)
    raise PlanError("no plan given: pass --plan, --preset, or --degree/--base-n")


def _calibration(config: RunConfig, input_shape) -> tuple[CalibrationSet, dict]:
    if config.calib_path is not None:
        calib = CalibrationSet.from_file(config.calib_path)
        info = {"source": str(config.calib_path), "count": calib.count}
    else:
        calib = CalibrationSet.synthetic(
            input_shape, config.calib_count, seed=config.calib_seed
        )
        info = {
            "source": "synthetic",
            "seed": config.calib_seed,
            "count": config.calib_count,
        }
    if calib.sample_shape != tuple(input_shape):
        raise ShapeError(
            f"calibration shape {calib.sample_shape} != model input {tuple(input_shape)}"
        )
    return calib, info


def run_compress(config: RunConfig) -> dict:
    """plan -> decompose -> (optional) reconstruct -> serialize + report."""
    net = load_model(config.model)
    plan = _resolve_plan(net, config)
    flops_before, per_before = network_flops(net)

    compressed, decomps = decompose_network(
        net, plan.layer_ranks, force_pointwise=config.force_pointwise
    )

    recon_reports = {}
    calib_info = None
    if config.reconstruct and plan.layer_ranks:
        calib, calib_info = _calibration(config, net.input_shape)
        compressed, reports = reconstruct_network(
            net,
            compressed,
            calib,
            ridge=config.ridge,
            intercept=config.intercept,
            symmetric=config.symmetric,
        )
        recon_reports = {r.layer_id: r for r in reports}

    flops_after, per_after = network_flops(compressed)
    layer_rows = []
    for layer_id, n in plan.layer_ranks.items():
        decomp = decomps[layer_id]
        row = {
            "layer": layer_id,
            "n": n,
            "truncation_error": decomp.total_truncation_error,
            "block_truncation_errors": [
                float(e) for e in decomp.block_truncation_errors
            ],
            "flops_before": per_before[layer_id],
            "flops_after": per_after[f"{layer_id}.d"] + per_after[p_layer_id(layer_id)],
        }
        recon = recon_reports.get(layer_id)
        if recon is not None:
            row.update(
                residual_before=recon.residual_before,
                residual_after=recon.residual_after,
                ridge=recon.ridge,
                sample_rows=recon.sample_rows,
                identity_fallback=recon.used_identity_fallback,
            )
        layer_rows.append(row)

    config.out_dir.mkdir(parents=True, exist_ok=True)
    model_path = save_model(compressed, config.out_dir / "model.json")
    report = {
        "model": net.name,
        "plan": plan.to_json(),
        "reconstruction": {
            "enabled": bool(config.reconstruct and plan.layer_ranks),
            "symmetric": config.symmetric,
            "intercept": config.intercept,
            "calibration": calib_info,
        },
        "flops_before": flops_before,
        "flops_after": flops_after,
        "flops_ratio": flops_after / flops_before,
        "layers": layer_rows,
        "output_model": model_path.name,
    }
    report_path = config.out_dir / "report.json"
    report_path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report


def cmd_inspect(args) -> int:
    net = load_model(args.model)
    shapes = propagate_shapes(net)
    total, per_layer = network_flops(net)
    header = f"{'layer':<18}{'kind':<15}{'stage':<10}{'output':<16}{'flops':>14}"
    print(header)
    print("-" * len(header))
    for layer in net.layers:
        shape = "x".join(str(v) for v in shapes[layer.id])
        flops = per_layer.get(layer.id, 0)
        stage = layer.stage or "-"
        flops_text = f"{flops:,}" if flops else "-"
        print(f"{layer.id:<18}{layer.kind:<15}{stage:<10}{shape:<16}{flops_text:>14}")
    print("-" * len(header))
    print(f"{'total':<59}{total:>14,}")
    return EXIT_OK


def cmd_plan(args) -> int:
    net = load_model(args.model)
    if args.preset:
        plan = plan_from_preset(net, args.preset)
    else:
        if not args.degree or args.base_n is None:
            raise PlanError("pass --preset or both --degree and --base-n")
        caps = dict(kv.split("=") for kv in args.stage_cap or [])
        plan = build_plan(
            net,
            args.degree,
            args.base_n,
            stage_caps={k: int(v) for k, v in caps.items()},
            skip_stages=args.skip_stage or [],
            skip_layers=args.skip_layer or [],
        )
    plan.save(args.output)
    print(f"plan written to {args.output}")
    print(f"stage ranks: {plan.stage_ns}")
    print(f"predicted flops: {plan.predicted_flops:,}")
    for note in plan.adjustments:
        print(f"note: {note}")
    return EXIT_OK


def cmd_compress(args) -> int:
    config = RunConfig(
        model=Path(args.model),
        out_dir=Path(args.output),
        plan_path=Path(args.plan) if args.plan else None,
        preset=args.preset,
        degree=args.degree,
        base_n=args.base_n,
        calib_path=Path(args.calib) if args.calib else None,
        calib_seed=args.calib_seed,
        calib_count=args.calib_count,
        ridge=args.ridge,
        reconstruct=not args.no_reconstruct,
        intercept=not args.no_intercept,
        symmetric=args.symmetric_reconstruction,
        force_pointwise=args.force_1x1,
    )
    report = run_compress(config)
    print(
        f"compressed {report['model']}: "
        f"{report['flops_before']:,} -> {report['flops_after']:,} flops "
        f"(x{report['flops_before'] / max(report['flops_after'], 1):.2f})"
    )
    print(f"outputs in {config.out_dir}")
    return EXIT_OK


def _decomposed_pairs(compressed: NetworkSpec):
    """(source_id, d_layer, p_layer) for every decomposed conv, in order."""
    pairs = []
    for layer in compressed.layers:
        if layer.kind == "conv" and layer.id.endswith(".p"):
            src = layer.meta.get("decomposed_from")
            if src:
                pairs.append((src, compressed.layer(f"{src}.d"), layer))
    return pairs


def cmd_analyze(args) -> int:
    original = load_model(args.model)
    compressed = load_model(args.compressed)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    mode = "sigma" if args.energy_sigma else "squared"

    pairs = _decomposed_pairs(compressed)
    if not pairs:
        raise PlanError(f"{args.compressed}: no decomposed layers to analyze")

    rank_reports = []
    labels = []
    for src, d_layer, p_layer in pairs:
        conv = original.layer(src).conv
        n = int(p_layer.meta.get("rank_n", d_layer.conv.c_in // d_layer.conv.groups))
        report = equal_flops_ranks(conv.c_in, conv.c_out, conv.k, n)
        rank_reports.append(report)
        labels.append(src)

        w_mat = conv.weight_matrix()
        write_energy_csv(
            out_dir / f"energy_{src}_original.csv",
            jacobian_energy_curve(w_mat, mode=mode),
        )
        write_energy_csv(
            out_dir / f"energy_{src}_group.csv",
            jacobian_energy_curve(
                group_conv_matrix(d_layer.conv), p_layer.conv.weight_matrix(),
                mode=mode,
            ),
        )
        if report.rank_svd >= 1:
            write_energy_csv(
                out_dir / f"energy_{src}_svd_baseline.csv",
                jacobian_energy_curve(
                    svd_strategy_matrix(w_mat, report.rank_svd), mode=mode
                ),
            )
    write_rank_report_csv(out_dir / "ranks.csv", rank_reports, labels=labels)

    if args.correlation:
        if not args.calib and args.calib_count is None:
            raise PlanError(
                "correlation analysis needs calibration data: "
                "pass --calib FILE or --calib-count N"
            )
        if args.calib:
            calib = CalibrationSet.from_file(args.calib)
        else:
            calib = CalibrationSet.synthetic(
                compressed.input_shape, args.calib_count, seed=args.calib_seed
            )
        summary_rows = _correlation_analysis(
            compressed, pairs, calib, out_dir, pre_activation=args.corr_pre_activation
        )
        if summary_rows:
            with open(out_dir / "correlation_summary.csv", "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(summary_rows[0]))
                writer.writeheader()
                writer.writerows(summary_rows)

    print(f"analysis written to {out_dir}")
    return EXIT_OK


def _pointwise_feeding(compressed: NetworkSpec, d_layer) -> tuple[str, str] | None:
    """Walk back from a group conv through activations to the pointwise conv
    that feeds it. Returns (pointwise_id, post_activation_tap_id) or None if
    anything else (pooling, joins) intervenes."""
    index = {l.id: i for i, l in enumerate(compressed.layers)}
    current = d_layer
    tap_id = None
    while True:
        in_id = current.input
        if in_id is None:
            pos = index[current.id]
            if pos == 0:
                return None
            in_id = compressed.layers[pos - 1].id
        prev = compressed.layer(in_id)
        if tap_id is None:
            tap_id = prev.id  # the map the group conv actually consumes
        if prev.kind == "conv":
            if prev.id.endswith(".p") and prev.meta.get("decomposed_from"):
                return prev.id, tap_id
            return None
        if prev.kind in ("relu", "channel_affine"):
            current = prev
            continue
        return None


def _correlation_analysis(compressed, pairs, calib, out_dir, pre_activation=False):
    """Correlate each group conv's output with the output maps of the
    pointwise conv feeding it (post-activation by default)."""
    rows = []
    for src, d_layer, _ in pairs:
        found = _pointwise_feeding(compressed, compressed.layer(d_layer.id))
        if found is None:
            continue
        point_id, post_act_id = found
        tap_point = point_id if pre_activation else post_act_id
        taps = {tap_point, d_layer.id}
        point_rows, group_rows = [], []
        for sample in calib.samples:
            _, recorded = forward(compressed, sample, taps=taps, stop_after=d_layer.id)
            point_rows.append(recorded[tap_point].response)
            group_rows.append(recorded[d_layer.id].response)
        point = np.vstack(point_rows)
        group = np.vstack(group_rows)
        if point.shape[0] != group.shape[0]:
            continue  # strided group conv; rows misalign
        n = d_layer.conv.c_in // d_layer.conv.groups
        report = filter_correlation(point, group, block_size=n)
        write_correlation_csv(out_dir / f"correlation_{src}.csv", report)
        rows.append(
            {
                "layer": src,
                "pointwise": point_id,
                "tap": tap_point,
                "n": n,
                "mean_in_block": report.mean_in_block,
                "mean_out_block": report.mean_out_block,
                "zero_variance_channels": len(report.zero_variance_channels),
            }
        )
    return rows


def cmd_gen_fixtures(args) -> int:
    if args.name not in BUILDERS:
        raise ModelFormatError(
            f"unknown fixture {args.name!r}; available: {sorted(BUILDERS)}"
        )
    net = BUILDERS[args.name](args.seed)
    out_dir = Path(args.output)
    path = save_model(net, out_dir / f"{args.name}.json")
    total, _ = network_flops(net)
    print(f"{args.name}: {len(net.layers)} layers, {total:,} flops")
    print(f"written to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groupcompress",
        description="Decompose CNN convolutions into filter-group + pointwise pairs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_inspect = sub.add_parser("inspect", help="print the layer table and FLOPs")
    p_inspect.add_argument("model")
    p_inspect.set_defaults(func=cmd_inspect)

    p_plan = sub.add_parser("plan", help="build and save a compression plan")
    p_plan.add_argument("model")
    p_plan.add_argument("--preset", choices=list_presets())
    p_plan.add_argument("--degree", choices=["constant", "half", "quarter"])
    p_plan.add_argument("--base-n", type=int)
    p_plan.add_argument("--stage-cap", action="append", metavar="STAGE=N")
    p_plan.add_argument("--skip-stage", action="append", metavar="STAGE")
    p_plan.add_argument("--skip-layer", action="append", metavar="LAYER")
    p_plan.add_argument("-o", "--output", required=True)
    p_plan.set_defaults(func=cmd_plan)

    p_comp = sub.add_parser("compress", help="decompose, reconstruct and serialize")
    p_comp.add_argument("model")
    p_comp.add_argument("-o", "--output", required=True, help="output directory")
    p_comp.add_argument("--plan")
    p_comp.add_argument("--preset", choices=list_presets())
    p_comp.add_argument("--degree", choices=["constant", "half", "quarter"])
    p_comp.add_argument("--base-n", type=int)
    p_comp.add_argument("--calib", help="calibration manifest (json)")
    p_comp.add_argument("--calib-seed", type=int, default=0)
    p_comp.add_argument("--calib-count", type=int, default=128)
    p_comp.add_argument("--ridge", type=float, default=None)
    p_comp.add_argument("--no-reconstruct", action="store_true")
    p_comp.add_argument("--no-intercept", action="store_true")
    p_comp.add_argument("--symmetric-reconstruction", action="store_true")
    p_comp.add_argument("--force-1x1", action="store_true")
    p_comp.set_defaults(func=cmd_compress)

    p_an = sub.add_parser("analyze", help="emit energy/rank/correlation CSVs")
    p_an.add_argument("model")
    p_an.add_argument("compressed")
    p_an.add_argument("-o", "--output", required=True, help="output directory")
    p_an.add_argument("--correlation", action="store_true")
    p_an.add_argument("--calib")
    p_an.add_argument("--calib-seed", type=int, default=0)
    p_an.add_argument("--calib-count", type=int, default=None)
    p_an.add_argument("--energy-sigma", action="store_true",
                      help="accumulate sigma instead of sigma^2")
    p_an.add_argument("--corr-pre-activation", action="store_true",
                      help="correlate raw pointwise outputs instead of the "
                      "post-activation maps")
    p_an.set_defaults(func=cmd_analyze)

    p_gen = sub.add_parser("gen-fixtures", help="write synthetic models")
    p_gen.add_argument("name", choices=sorted(BUILDERS))
    p_gen.add_argument("-o", "--output", required=True, help="output directory")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.set_defaults(func=cmd_gen_fixtures)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ModelFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (PlanError, DecompositionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PLAN
    except (NumericalError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # pragma: no cover - last resort
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GENERIC


if __name__ == "__main__":
    sys.exit(main())
