"""End-to-end CLI coverage on a small toy dataset; every subcommand runs."""

import hashlib
import json
from pathlib import Path

import pytest
from PIL import Image

from adapts.cli import main

FAST_CFG = {"epochs": 3, "seed": 1}


def tree_digest(root: Path, skip=()) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(FAST_CFG))
    rc = main(["make-toy-data", "--out", str(root / "data"), "--categories", "2",
               "--train", "8", "--test", "3", "--seed", "3"])
    assert rc == 0
    rc = main(["train", "--data", str(root / "data"), "--scenario", "single",
               "--out", str(root / "bundle"), "--config", str(cfg)])
    assert rc == 0
    return root


def test_make_toy_data_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert main(["make-toy-data", "--out", str(tmp_path / sub), "--categories", "1",
                     "--train", "2", "--test", "1", "--seed", "9"]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_train_writes_bundle_and_report(workdir):
    assert (workdir / "bundle" / "config.json").is_file()
    assert (workdir / "bundle" / "report.csv").is_file()
    assert (workdir / "bundle" / "report.json").is_file()
    assert (workdir / "bundle" / "backbone" / "manifest.json").is_file()
    assert (workdir / "bundle" / "prototypes" / "manifest.json").is_file()
    assert (workdir / "bundle" / "logs" / "pattern00.csv").is_file()


def test_eval_reproduces_stored_report(workdir, tmp_path):
    rc = main(["eval", "--bundle", str(workdir / "bundle"), "--data", str(workdir / "data"),
               "--report", str(tmp_path / "rep")])
    assert rc == 0
    assert (tmp_path / "rep" / "report.csv").read_bytes() == (workdir / "bundle" / "report.csv").read_bytes()


def test_infer_writes_heatmap_with_input_dimensions(workdir, tmp_path, capsys):
    image = next((workdir / "data" / "pattern00" / "test" / "synthetic").glob("*.png"))
    heat = tmp_path / "heat.png"
    raw = tmp_path / "heat_raw"
    rc = main(["infer", "--bundle", str(workdir / "bundle"), "--image", str(image),
               "--heatmap-out", str(heat), "--heatmap-raw-out", str(raw)])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["task_name"] == "pattern00"
    assert out["image_score"] > 0
    with Image.open(heat) as hm, Image.open(image) as im:
        assert hm.size == im.size
        assert hm.mode == "L"
    from adapts.data import load_heatmap_raw

    arr = load_heatmap_raw(raw)
    assert arr.shape == (64, 64)
    assert float(arr.max()) == pytest.approx(out["image_score"])


def test_identify(workdir, capsys):
    image = next((workdir / "data" / "pattern01" / "test" / "good").glob("*.png"))
    rc = main(["identify", "--bundle", str(workdir / "bundle"), "--image", str(image)])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["task_name"] == "pattern01"
    assert len(out["distances"]) == 2


def test_quantize_and_mem_report(workdir, tmp_path, capsys):
    rc = main(["quantize", "--bundle", str(workdir / "bundle"), "--out", str(tmp_path / "q")])
    assert rc == 0
    capsys.readouterr()
    rc = main(["mem-report", "--bundle", str(tmp_path / "q")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "Additional" in out
    # the quantized bundle evaluates: reuse it end to end
    rc = main(["eval", "--bundle", str(tmp_path / "q"), "--data", str(workdir / "data")])
    assert rc == 0


def test_mem_report_reference_architecture(capsys):
    rc = main(["mem-report", "--arch", "wide_resnet50_2", "--kind", "linear",
               "--layers", "2,3", "--precision", "f32"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "Additional = 10.03 MB" in out


def test_mem_report_small_variant(capsys):
    rc = main(["mem-report", "--arch", "wide_resnet50_2", "--kind", "linear",
               "--layers", "2", "--precision", "int8"])
    assert rc == 0
    assert "Additional = 0.50 MB" in capsys.readouterr().out


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        assert main(["mem-report", "--no-such-flag"]) == 1
        err = capsys.readouterr().err
        assert "Usage" in err or "usage" in err

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_missing_dataset_is_validation_error(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "b")]) == 1

    def test_bad_config_key(self, workdir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"epoch": 1}))
        rc = main(["train", "--data", str(workdir / "data"), "--out", str(tmp_path / "b"),
                   "--config", str(bad)])
        assert rc == 1

    def test_corrupt_bundle_is_runtime_failure(self, workdir, tmp_path, capsys):
        import shutil

        broken = tmp_path / "broken"
        shutil.copytree(workdir / "bundle", broken)
        payload = (broken / "prototypes" / "tensors.bin").read_bytes()
        (broken / "prototypes" / "tensors.bin").write_bytes(
            bytes([payload[0] ^ 0xFF]) + payload[1:]
        )
        image = next((workdir / "data" / "pattern00" / "test" / "good").glob("*.png"))
        rc = main(["identify", "--bundle", str(broken), "--image", str(image)])
        assert rc == 1  # checksum failure is a validation error

    def test_bad_continual_order(self, workdir, tmp_path):
        rc = main(["train", "--data", str(workdir / "data"), "--scenario", "continual",
                   "--out", str(tmp_path / "b"), "--order", "bogus,patterns"])
        assert rc == 1

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0
        assert main(["train", "--help"]) == 0


def test_train_rerun_bit_identical(workdir, tmp_path):
    """Same seed, same data: bundle artifacts and reports match byte for byte."""
    cfg = workdir / "config.json"
    out2 = tmp_path / "bundle2"
    rc = main(["train", "--data", str(workdir / "data"), "--scenario", "single",
               "--out", str(out2), "--config", str(cfg)])
    assert rc == 0
    assert tree_digest(out2) == tree_digest(workdir / "bundle")
