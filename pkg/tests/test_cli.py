import json

import numpy as np
import pytest

from macleak.cli import EXIT_ARTIFACTS, EXIT_CONFIG, EXIT_FORMAT, EXIT_OK, main


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    cfg = {
        "pixel_count": 12,
        "neuron_count": 2,
        "weights_seed": 19,
        "iapam": [0, 1, 1, 1, 1, 0, 1, 0, 1, 0, 1, 1],
        "activation_ratio": 0.5,
        "noise_sigma": 0.0,
        "extended_leakage": False,
        "variant": "branched",
        "rng_seed": 55,
        "trace_count": 300,
        "experiment_count": 2,
        "schedule": [50, 100, 300],
    }
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def staged(small_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    assert main(["simulate", "-c", str(small_config), "-o", str(out)]) == EXIT_OK
    assert main(["calibrate", "-o", str(out)]) == EXIT_OK
    assert main(["classify", "-o", str(out)]) == EXIT_OK
    assert main(["preprocess", "-o", str(out)]) == EXIT_OK
    return out


class TestPipeline:
    def test_attack_and_report(self, staged):
        assert main(["attack", "-o", str(staged), "--mode", "protected"]) == EXIT_OK
        assert main(["attack", "-o", str(staged), "--mode", "circumvented"]) == EXIT_OK
        assert main(["report", "-o", str(staged)]) == EXIT_OK
        report = (staged / "report.txt").read_text()
        assert "circumvented" in report and "important weights" in report
        # zero-noise circumvention recovers every important target
        assert "circumvented: recovered 100.0% of the important weights" in report
        header = (staged / "ge_curves_circumvented.csv").read_text().splitlines()[0]
        assert header == "neuron,weight_index,trace_count,ge_bits,experiment_count"

    def test_simulate_is_idempotent(self, small_config, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "-c", str(small_config), "-o", str(out1)]) == EXIT_OK
        assert main(["simulate", "-c", str(small_config), "-o", str(out2)]) == EXIT_OK
        m1 = json.loads((out1 / "manifest.json").read_text())
        m2 = json.loads((out2 / "manifest.json").read_text())
        assert m1 == m2
        assert (out1 / "traces_e0_n0.mpbtrc").read_bytes() == (out2 / "traces_e0_n0.mpbtrc").read_bytes()

    def test_unprotected_flow(self, small_config, tmp_path):
        cfg = json.loads(small_config.read_text())
        cfg["variant"] = "unprotected"
        cfg_path = tmp_path / "u.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "unprot"
        assert main(["simulate", "-c", str(cfg_path), "-o", str(out)]) == EXIT_OK
        assert main(["attack", "-o", str(out), "--mode", "unprotected"]) == EXIT_OK
        rows = (out / "attack_unprotected.csv").read_text().splitlines()[1:]
        assert rows
        # zero noise: every target recovered at rank 1
        assert all(int(r.split(",")[7]) == 1 for r in rows)

    def test_cff_flow(self, small_config, tmp_path):
        cfg = json.loads(small_config.read_text())
        cfg["variant"] = "control_flow_free"
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "cff"
        assert main(["simulate", "-c", str(cfg_path), "-o", str(out)]) == EXIT_OK
        assert main(["calibrate", "-o", str(out)]) == EXIT_OK
        assert main(["cff-study", "-o", str(out)]) == EXIT_OK
        row = (out / "cff_study.csv").read_text().splitlines()[1].split(",")
        assert row[0] == row[1]  # derived equals true map at zero noise
        assert row[2] == "0"


class TestErrorPaths:
    def test_missing_artifacts_exit_code(self, tmp_path):
        assert main(["classify", "-o", str(tmp_path / "nope")]) == EXIT_ARTIFACTS

    def test_wrong_variant_exit_code(self, staged):
        assert main(["attack", "-o", str(staged), "--mode", "unprotected"]) == EXIT_CONFIG

    def test_corrupt_container_exit_code(self, small_config, tmp_path):
        out = tmp_path / "corrupt"
        assert main(["simulate", "-c", str(small_config), "-o", str(out)]) == EXIT_OK
        target = out / "traces_e0_n0.mpbtrc"
        blob = bytearray(target.read_bytes())
        blob[0] ^= 0xFF
        target.write_bytes(bytes(blob))
        assert main(["calibrate", "-o", str(out)]) == EXIT_FORMAT

    def test_mismatched_config_hash_exit_code(self, small_config, tmp_path):
        out = tmp_path / "mismatch"
        assert main(["simulate", "-c", str(small_config), "-o", str(out)]) == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        manifest["config"]["noise_sigma"] = 99.0
        manifest["config_hash"] = __import__("hashlib").sha256(
            json.dumps(manifest["config"], sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest()
        (out / "manifest.json").write_text(json.dumps(manifest))
        assert main(["calibrate", "-o", str(out)]) == EXIT_ARTIFACTS

    def test_report_without_results(self, small_config, tmp_path):
        out = tmp_path / "empty"
        assert main(["simulate", "-c", str(small_config), "-o", str(out)]) == EXIT_OK
        assert main(["report", "-o", str(out)]) == EXIT_OK
        assert "nothing to report" in (out / "report.txt").read_text()
