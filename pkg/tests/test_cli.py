import json

import numpy as np
import pytest

from groupcompress.cli import (
    EXIT_FORMAT,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_PLAN,
    main,
)
from groupcompress.fixtures import build_toy_cnn, build_toy_three
from groupcompress.model import forward
from groupcompress.modelio import load_model, save_model


@pytest.fixture
def toy3_path(tmp_path):
    return save_model(build_toy_three(seed=0), tmp_path / "toy3.json")


@pytest.fixture
def toy4_path(tmp_path):
    return save_model(build_toy_cnn(seed=0), tmp_path / "toy4.json")


class TestInspect:
    def test_prints_table_and_total(self, toy3_path, capsys):
        assert main(["inspect", str(toy3_path)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "c1" in out and "total" in out
        assert "84,240" in out

    def test_missing_model_is_format_error(self, tmp_path, capsys):
        assert main(["inspect", str(tmp_path / "none.json")]) == EXIT_FORMAT
        assert "error" in capsys.readouterr().err

    def test_single_conv_model(self, tmp_path, capsys):
        from groupcompress.model import ConvWeights, LayerSpec, NetworkSpec

        rng = np.random.default_rng(0)
        net = NetworkSpec(
            "one",
            (2, 5, 5),
            [
                LayerSpec(
                    id="only",
                    kind="conv",
                    conv=ConvWeights(
                        2, 3, 3, pad=1, weights=rng.standard_normal((3, 2, 3, 3))
                    ),
                )
            ],
        )
        path = save_model(net, tmp_path / "one.json")
        assert main(["inspect", str(path)]) == EXIT_OK
        out = capsys.readouterr().out
        assert f"{2 * 2 * 9 * 3 * 25:,}" in out  # 2*(c_in/g)*k^2*c_out*h*w

    def test_empty_layer_list_is_format_error(self, tmp_path, capsys):
        path = tmp_path / "empty.json"
        path.write_text(
            json.dumps(
                {
                    "format_version": 1,
                    "input_shape": [1, 2, 2],
                    "blob": "empty.bin",
                    "layers": [],
                }
            )
        )
        (tmp_path / "empty.bin").write_bytes(b"")
        assert main(["inspect", str(path)]) == EXIT_FORMAT
        assert "no layers" in capsys.readouterr().err


class TestPlan:
    def test_preset_plan_roundtrip(self, toy3_path, tmp_path, capsys):
        plan_path = tmp_path / "plan.json"
        code = main(
            [
                "plan",
                str(toy3_path),
                "--degree",
                "constant",
                "--base-n",
                "2",
                "-o",
                str(plan_path),
            ]
        )
        assert code == EXIT_OK
        plan = json.loads(plan_path.read_text())
        assert plan["layer_ranks"] == {"c1": 1, "c2": 2, "c3": 2}

    def test_missing_plan_args_is_plan_error(self, toy3_path, tmp_path, capsys):
        code = main(["plan", str(toy3_path), "-o", str(tmp_path / "p.json")])
        assert code == EXIT_PLAN

    def test_stage_caps_flag(self, toy4_path, tmp_path):
        plan_path = tmp_path / "plan.json"
        code = main(
            [
                "plan",
                str(toy4_path),
                "--degree",
                "quarter",
                "--base-n",
                "1",
                "--stage-cap",
                "s4=2",
                "-o",
                str(plan_path),
            ]
        )
        assert code == EXIT_OK
        plan = json.loads(plan_path.read_text())
        assert plan["stage_ns"] == {"s8": 1, "s4": 2}


class TestCompress:
    def test_lossless_at_full_rank(self, toy4_path, tmp_path):
        out_dir = tmp_path / "out"
        code = main(
            [
                "compress",
                str(toy4_path),
                "-o",
                str(out_dir),
                "--degree",
                "constant",
                "--base-n",
                "4",
                "--no-reconstruct",
            ]
        )
        assert code == EXIT_OK
        original = load_model(toy4_path)
        compressed = load_model(out_dir / "model.json")
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.standard_normal((4, 8, 8))
            a = forward(original, x)
            b = forward(compressed, x)
            # The decomposition itself is exact at n = c_in; the residual
            # here is float32 storage quantization of D and P on disk.
            assert np.linalg.norm(a - b) <= 1e-5 * max(np.linalg.norm(a), 1e-30)

    def test_determinism_byte_identical(self, toy3_path, tmp_path):
        outs = []
        for name in ("run1", "run2"):
            out_dir = tmp_path / name
            code = main(
                [
                    "compress",
                    str(toy3_path),
                    "-o",
                    str(out_dir),
                    "--degree",
                    "constant",
                    "--base-n",
                    "1",
                    "--calib-seed",
                    "7",
                    "--calib-count",
                    "48",
                ]
            )
            assert code == EXIT_OK
            outs.append(out_dir)
        for name in ("model.json", "model.bin", "report.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_reconstruction_reduces_residual(self, toy3_path, tmp_path):
        reports = {}
        for flag, name in ((True, "with"), (False, "without")):
            out_dir = tmp_path / name
            argv = [
                "compress",
                str(toy3_path),
                "-o",
                str(out_dir),
                "--degree",
                "constant",
                "--base-n",
                "1",
                "--calib-count",
                "64",
            ]
            if not flag:
                argv.append("--no-reconstruct")
            assert main(argv) == EXIT_OK
            reports[name] = json.loads((out_dir / "report.json").read_text())

        # Same truncation either way; reconstruction must not hurt the fit.
        with_recon = reports["with"]["layers"]
        assert all(
            l["residual_after"] <= l["residual_before"] + 1e-12 for l in with_recon
        )
        assert "residual_after" not in reports["without"]["layers"][0]

        original = load_model(toy3_path)
        calib_samples = np.random.default_rng(0).standard_normal((64, 3, 6, 6))

        def calib_error(out_name):
            net = load_model(tmp_path / out_name / "model.json")
            err = 0.0
            for x in calib_samples:
                err += np.sum((forward(original, x) - forward(net, x)) ** 2)
            return err

        assert calib_error("with") <= calib_error("without")

    def test_report_content(self, toy3_path, tmp_path):
        out_dir = tmp_path / "out"
        main(
            [
                "compress",
                str(toy3_path),
                "-o",
                str(out_dir),
                "--degree",
                "half",
                "--base-n",
                "1",
                "--calib-count",
                "48",
            ]
        )
        report = json.loads((out_dir / "report.json").read_text())
        assert report["flops_after"] < report["flops_before"]
        for row in report["layers"]:
            assert row["flops_after"] < row["flops_before"]
            assert row["truncation_error"] >= 0.0
            assert row["ridge"] > 0.0
        assert report["reconstruction"]["calibration"]["source"] == "synthetic"

    def test_missing_plan_is_plan_error(self, toy3_path, tmp_path):
        assert (
            main(["compress", str(toy3_path), "-o", str(tmp_path / "o")]) == EXIT_PLAN
        )

    def test_calibration_file_input(self, toy3_path, tmp_path):
        from groupcompress.reconstruct import CalibrationSet

        calib_path = CalibrationSet.synthetic((3, 6, 6), 40, seed=3).save(
            tmp_path / "calib.json"
        )
        out_dir = tmp_path / "out"
        code = main(
            [
                "compress",
                str(toy3_path),
                "-o",
                str(out_dir),
                "--degree",
                "constant",
                "--base-n",
                "1",
                "--calib",
                str(calib_path),
            ]
        )
        assert code == EXIT_OK
        report = json.loads((out_dir / "report.json").read_text())
        assert report["reconstruction"]["calibration"]["count"] == 40

    def test_wrong_calibration_shape_is_numeric_error(self, toy3_path, tmp_path):
        from groupcompress.reconstruct import CalibrationSet

        calib_path = CalibrationSet.synthetic((2, 6, 6), 40, seed=3).save(
            tmp_path / "calib.json"
        )
        code = main(
            [
                "compress",
                str(toy3_path),
                "-o",
                str(tmp_path / "o"),
                "--degree",
                "constant",
                "--base-n",
                "1",
                "--calib",
                str(calib_path),
            ]
        )
        assert code == EXIT_NUMERIC


class TestAnalyze:
    @pytest.fixture
    def compressed_dir(self, toy3_path, tmp_path):
        out_dir = tmp_path / "out"
        main(
            [
                "compress",
                str(toy3_path),
                "-o",
                str(out_dir),
                "--degree",
                "constant",
                "--base-n",
                "2",
                "--calib-count",
                "48",
            ]
        )
        return out_dir

    def test_csv_bundle(self, toy3_path, compressed_dir, tmp_path):
        analysis = tmp_path / "analysis"
        code = main(
            [
                "analyze",
                str(toy3_path),
                str(compressed_dir / "model.json"),
                "-o",
                str(analysis),
            ]
        )
        assert code == EXIT_OK
        assert (analysis / "ranks.csv").exists()
        for layer in ("c1", "c2", "c3"):
            assert (analysis / f"energy_{layer}_original.csv").exists()
            assert (analysis / f"energy_{layer}_group.csv").exists()

        def saturation_index(name):
            rows = (analysis / name).read_text().strip().splitlines()[1:]
            for row in rows:
                idx, _, energy = row.split(",")
                if float(energy) >= 1.0 - 1e-9:
                    return int(idx)
            return len(rows) - 1

        # The channel-SVD baseline saturates at its truncation rank; the
        # group decomposition keeps the full min(c_in, c_out) spectrum.
        assert saturation_index("energy_c3_svd_baseline.csv") < saturation_index(
            "energy_c3_group.csv"
        )

    def test_correlation_requires_calibration(self, toy3_path, compressed_dir, tmp_path, capsys):
        code = main(
            [
                "analyze",
                str(toy3_path),
                str(compressed_dir / "model.json"),
                "-o",
                str(tmp_path / "a"),
                "--correlation",
            ]
        )
        assert code == EXIT_PLAN
        assert "calibration" in capsys.readouterr().err

    def test_correlation_outputs(self, toy3_path, compressed_dir, tmp_path):
        analysis = tmp_path / "analysis"
        code = main(
            [
                "analyze",
                str(toy3_path),
                str(compressed_dir / "model.json"),
                "-o",
                str(analysis),
                "--correlation",
                "--calib-count",
                "100",
            ]
        )
        assert code == EXIT_OK
        assert (analysis / "correlation_summary.csv").exists()
        summary = (analysis / "correlation_summary.csv").read_text().splitlines()
        assert len(summary) == 3  # header + c2, c3

    def test_uncompressed_model_is_plan_error(self, toy3_path, tmp_path):
        code = main(
            ["analyze", str(toy3_path), str(toy3_path), "-o", str(tmp_path / "a")]
        )
        assert code == EXIT_PLAN


class TestGenFixtures:
    def test_toy_fixture_roundtrip(self, tmp_path, capsys):
        code = main(["gen-fixtures", "toy4", "-o", str(tmp_path), "--seed", "5"])
        assert code == EXIT_OK
        net = load_model(tmp_path / "toy4.json")
        assert len(net.conv_layers()) == 4

    def test_resnet34_fixture_flops(self, tmp_path, capsys):
        code = main(["gen-fixtures", "resnet34", "-o", str(tmp_path)])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "7,327,522,816" in out

    def test_resnet34_preset_d_measured_flops(self, tmp_path):
        # Depthwise-degree compression of the full network: the *measured*
        # FLOPs of the decomposed model must land on the published value.
        from groupcompress.model import network_flops

        assert main(["gen-fixtures", "resnet34", "-o", str(tmp_path)]) == EXIT_OK
        code = main(
            [
                "compress",
                str(tmp_path / "resnet34.json"),
                "-o",
                str(tmp_path / "d"),
                "--preset",
                "ours_res34_d",
                "--no-reconstruct",
            ]
        )
        assert code == EXIT_OK
        compressed = load_model(tmp_path / "d" / "model.json")
        total, _ = network_flops(compressed)
        assert abs(total - 1.11e9) <= 0.02 * 1.11e9

    def test_fixture_determinism(self, tmp_path):
        main(["gen-fixtures", "toy3", "-o", str(tmp_path / "a"), "--seed", "3"])
        main(["gen-fixtures", "toy3", "-o", str(tmp_path / "b"), "--seed", "3"])
        assert (tmp_path / "a/toy3.bin").read_bytes() == (
            tmp_path / "b/toy3.bin"
        ).read_bytes()
