import csv
import hashlib
import json
from pathlib import Path

import pytest

from sfuda3d import cli
from sfuda3d.data import MANIFEST_NAME, Manifest, read_volume

TINY = ["--set", "model.widths=[2,3,4]", "--set", "model.dilations=[1,2]"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def digest(folder: Path) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir())}


def test_gen_data_defaults_and_determinism(tmp_path):
    assert run("gen-data", "--data-dir", tmp_path / "a") == 0
    assert run("gen-data", "--data-dir", tmp_path / "b") == 0
    manifest = Manifest.read(tmp_path / "a" / MANIFEST_NAME)
    assert len(manifest.entries) == 28
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    for e in manifest.entries:
        assert read_volume(e.image_path).values.shape == read_volume(e.label_path).values.shape


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = {
        "seed": 7,
        "paths": {"data_dir": str(root / "data"), "checkpoint": str(root / "src.ckpt"),
                  "library": str(root / "lib.sgmm"), "adapted": str(root / "adapted.ckpt"),
                  "report_dir": str(root / "report")},
        "data": {"n_train": 1, "n_test": 1},
        "model": {"widths": [2, 3, 4], "dilations": [1, 2]},
        "train": {"epochs": 2, "steps_per_epoch": 2},
        "adapt": {"epochs": 2, "crops_per_epoch": 1, "stride": [32, 32, 32], "num_projections": 8},
        "eval_strides": [[32, 32, 32]],
    }
    path = root / "config.json"
    path.write_text(json.dumps(cfg))
    codes = {name: run(name, "--config", path) for name in ("gen-data", "train-source", "extract-gmms", "adapt")}
    codes["evaluate"] = run("evaluate", "--config", path, "--tag", "adapted")
    return root, path, codes


def test_pipeline_runs(pipeline):
    root, _, codes = pipeline
    assert set(codes.values()) == {0}
    report = root / "report"
    with (report / "adapt_trace.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "mean_swd", "wall_time"] and len(rows) == 3
    metrics = json.loads((report / "adapt_metrics.json").read_text())
    assert metrics["library_entries"] > 0
    assert (report / "dice_adapted_B_s32x32x32.csv").exists()
    assert json.loads((report / "dice_adapted_B_s32x32x32.json").read_text())["stride"] == [32, 32, 32]


def test_adapt_audit_is_source_free(pipeline):
    root, _, _ = pipeline
    opened = (root / "report" / "audit.log").read_text().splitlines()
    manifest = Manifest.read(root / "data" / MANIFEST_NAME)
    source = {str(p) for e in manifest.select("A") for p in (e.image_path, e.label_path)}
    target = {str(e.image_path) for e in manifest.select("B", "train")}
    assert opened and not source & set(opened)
    assert target <= set(opened)
    assert str(root / "src.ckpt") in opened and str(root / "lib.sgmm") in opened


def test_adapt_is_deterministic(pipeline, tmp_path):
    root, path, _ = pipeline
    first = (root / "adapted.ckpt").read_bytes()
    out = tmp_path / "again.ckpt"
    assert run("adapt", "--config", path, "--set", f"paths.adapted={json.dumps(str(out))}",
               "--report-dir", tmp_path) == 0
    assert out.read_bytes() == first


def test_adapt_rejects_foreign_library(pipeline, tmp_path):
    root, path, _ = pipeline
    other = tmp_path / "other.ckpt"
    assert run("train-source", "--config", path, "--seed", 8, "--report-dir", tmp_path,
               "--set", f"paths.checkpoint={json.dumps(str(other))}") == 0
    assert run("adapt", "--config", path, "--report-dir", tmp_path,
               "--set", f"paths.checkpoint={json.dumps(str(other))}") == 3


def test_exit_codes(pipeline, tmp_path):
    root, path, _ = pipeline
    assert run("print-config", "--set", "adapt.bogus=1") == 2
    assert run("adapt", "--config", tmp_path / "missing.json") == 2
    assert run("train-source", "--data-dir", tmp_path / "empty") == 3
    broken = tmp_path / "lib.sgmm"
    blob = bytearray((root / "lib.sgmm").read_bytes())
    blob[40] ^= 0xFF
    broken.write_bytes(bytes(blob))
    assert run("adapt", "--config", path, "--report-dir", tmp_path,
               "--set", f"paths.library={json.dumps(str(broken))}") == 3


def test_numerical_error_exit_code(pipeline, tmp_path, monkeypatch):
    from sfuda3d.exceptions import NumericalError

    def boom(*args, **kwargs):
        raise NumericalError("nan")

    monkeypatch.setattr(cli, "adapt", boom)
    root, path, _ = pipeline
    assert run("adapt", "--config", path, "--report-dir", tmp_path,
               "--set", f"paths.adapted={json.dumps(str(tmp_path / 'x.ckpt'))}") == 4


def test_threads_env(monkeypatch, capsys):
    monkeypatch.setenv("SFUDA3D_THREADS", "1")
    assert run("print-config", *TINY) == 0
    assert json.loads(capsys.readouterr().out)["model"]["widths"] == [2, 3, 4]
    monkeypatch.setenv("SFUDA3D_THREADS", "none")
    assert run("gen-data", "--data-dir", "/nonexistent/never") == 2
