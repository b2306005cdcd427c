"""End-to-end CLI smoke at desk scale with minimal iteration budgets."""

import gzip
import json
import struct

import numpy as np
import pytest
from click.testing import CliRunner

from inpaintseg.cli import main
from inpaintseg.volio import load_volume
from inpaintseg.volume import LabelMask, Volume


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One shared pipeline run: cohorts -> training -> adaptation -> reports."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()

    def run(*args):
        result = runner.invoke(main, list(args), catch_exceptions=False)
        assert result.exit_code == 0, result.output
        return result.output

    base = ("--scale", "4", "--out-dir", str(root), "--seed", "5")
    run(*base, "gen-cohort", "--family", "round", "--domain", "source_ct", "-n", "3",
        "--name", "src")
    run(*base, "gen-cohort", "--family", "round", "--domain", "shifted_ct", "-n", "3",
        "--name", "tgt")
    run(*base, "train-mlm", "--cohort", str(root / "src"), "--iters", "2", "--batch", "2")
    run(*base, "train-seg", "--cohort", str(root / "src"), "--iters", "2", "--batch", "2")
    run(*base, "distill", "--source", str(root / "source.ckpt"),
        "--mlm", str(root / "mlm.ckpt"), "--targets", str(root / "tgt"), "--iters", "1")
    run(*base, "adapt", "--pseudo", str(root / "pseudo.ckpt"),
        "--mlm", str(root / "mlm.ckpt"), "--targets", str(root / "tgt"),
        "--iters", "2", "--ema-interval", "1", "--beta", "0.5")
    return root, run, base


def test_pipeline_artifacts(workdir):
    root, _, _ = workdir
    for name in ("mlm.ckpt", "source.ckpt", "pseudo.ckpt", "target.ckpt",
                 "mlm_loss.csv", "seg_loss.csv", "distill_loss.csv", "adapt_loss.csv"):
        assert (root / name).exists(), name
    log = (root / "adapt_loss.csv").read_text().splitlines()
    assert log[0] == "iter,l_pseudo,l_recon,l_total"
    assert len(log) == 3


def test_manifests_record_provenance(workdir):
    root, _, _ = workdir
    manifest = json.loads((root / "adapt.manifest.json").read_text())
    assert manifest["stage"] == "adapt"
    assert set(manifest["inputs"]) == {"pseudo", "mlm", "targets"}
    assert "target.ckpt" in manifest["outputs"]


def test_eval_and_scatter(workdir):
    root, run, base = workdir
    out = run(*base, "eval", "--model", str(root / "target.ckpt"),
              "--cohort", str(root / "tgt"), "--condition", "full")
    assert "mean dice" in out
    report = json.loads((root / "report_full.json").read_text())
    assert report["full"]["n"] == 3

    run(*base, "scatter", "--target", str(root / "target.ckpt"),
        "--pseudo", str(root / "pseudo.ckpt"), "--mlm", str(root / "mlm.ckpt"),
        "--cohort", str(root / "tgt"))
    lines = (root / "loss_scatter.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 3 * 3


def test_finetune_mlm_cli(workdir):
    root, run, base = workdir
    run(*base, "finetune-mlm", "--mlm", str(root / "mlm.ckpt"),
        "--support", str(root / "src" / "case000_msk.vol.json"), "--iters", "1")
    assert (root / "mlm_tuned.ckpt").exists()


def test_preprocess_cli(workdir):
    root, run, base = workdir
    out = run(*base, "preprocess", "--image", str(root / "src" / "case000_img.vol.json"),
              "--mask", str(root / "src" / "case000_msk.vol.json"),
              "--crop-pad", "2", "--shape", "32,32,32", "--name", "prep")
    paths = json.loads(out)
    img = load_volume(paths["image"])
    msk = load_volume(paths["mask"])
    assert isinstance(img, Volume) and isinstance(msk, LabelMask)
    assert img.shape == (32, 32, 32)
    assert float(img.data.min()) >= -1.0 and float(img.data.max()) <= 1.0


def test_ingest_nifti_cli(workdir, tmp_path):
    root, run, base = workdir
    header = bytearray(352)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, 4, 4, 4, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, 16)
    struct.pack_into("<h", header, 72, 32)
    struct.pack_into("<8f", header, 76, 1.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, 352.0)
    header[344:348] = b"n+1\x00"
    data = np.arange(64, dtype="<f4").reshape(4, 4, 4)
    nii = tmp_path / "t.nii.gz"
    with gzip.open(nii, "wb") as f:
        f.write(bytes(header) + data.tobytes(order="F"))

    run(*base, "ingest-nifti", "--in", str(nii), "--kind", "image", "--name", "scan")
    vol = load_volume(root / "scan")
    assert vol.shape == (4, 4, 4)
    assert vol.spacing == (2.0, 2.0, 2.0)


def test_config_file_supplies_defaults(tmp_path):
    runner = CliRunner()
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gen-cohort": {"n": 2}}))
    result = runner.invoke(main, [
        "--config", str(cfg), "--scale", "4", "--out-dir", str(tmp_path / "o"),
        "gen-cohort", "--family", "round", "--domain", "source_ct",
    ], catch_exceptions=False)
    assert result.exit_code == 0, result.output
    manifest = json.loads((tmp_path / "o" / "round_source_ct" / "manifest.json").read_text())
    assert manifest["n"] == 2
