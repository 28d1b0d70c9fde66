import json

import pytest

from multibackmap.cli import main
from multibackmap.io import OUTPUT_ROOT_ENV, parse_pdb, sha256_file
from multibackmap.train import TrainConfig, split_indices

TINY_CONFIG = """\
schema_version: 1
ladder: [calpha, "segments:3"]
steps:
  - {Node embedding dimension F: 8, Latent dimension m: 3, CG cutoff D_cut: 12.0, FG cutoff d_cut: 3.0, Decoder Convolution Depth: 1}
  - {n_features: 8, latent_dim: 3, cg_cutoff: 12.0, fg_cutoff: 3.0, dec_depth: 1}
train: {epochs: 2, batch_size: 4, learning_rate: 0.005}
"""


def _hashes(d):
    return {p.relative_to(d).as_posix(): sha256_file(p) for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY_CONFIG)
    assert main(["--seed", "1", "--out", str(root / "synth"), "synth", "--residues", "12", "--frames", "20"]) == 0
    assert main(["--config", str(cfg), "--out", str(root / "train"), "train", "--input", str(root / "synth" / "ensemble.pdb")]) == 0
    return root


def test_unknown_flag_is_usage_error(capsys):
    assert main(["synth", "--bogus"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_subcommand_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_runtime_failure_exit_2(tmp_path, capsys):
    assert main(["--out", str(tmp_path), "rg", "--input", str(tmp_path / "missing.pdb")]) == 2
    assert "rg" in capsys.readouterr().err


def test_coarsen_reports_rho(tmp_path, capsys):
    assert main(["--out", str(tmp_path / "s"), "synth", "--residues", "181", "--frames", "2"]) == 0
    assert main(["--out", str(tmp_path / "c"), "coarsen", "--input", str(tmp_path / "s" / "ensemble.pdb"), "--beads", "10"]) == 0
    assert "rho = 18.10" in capsys.readouterr().out
    summary = json.loads((tmp_path / "c" / "summary.json").read_text())
    assert summary["sizes"] == [724, 181, 10] and summary["rho"] == [1.0, 18.1]


def test_manifest_records_outputs(workspace):
    man = json.loads((workspace / "train" / "manifest.json").read_text())
    assert man["command"] == "train" and man["seed"] == 0
    for name, digest in man["outputs"].items():
        hits = list((workspace / "train").rglob(name))
        assert any(sha256_file(h) == digest for h in hits)
    assert set(man["versions"]) >= {"numpy", "scipy", "python", "multibackmap"}


def test_output_root_env(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert main(["rg", "--input", str(workspace / "synth" / "ensemble.pdb")]) == 0
    rows = (tmp_path / "rg" / "rg.csv").read_text().splitlines()
    assert rows[0] == "frame,rg_nm" and len(rows) == 21
    assert (tmp_path / "rg" / "manifest.json").exists()


def test_rama_csv(workspace, tmp_path):
    assert main(["--out", str(tmp_path), "rama", "--input", str(workspace / "synth" / "ensemble.pdb")]) == 0
    rows = (tmp_path / "rama.csv").read_text().splitlines()
    assert len(rows) == 1 + 72 * 72
    assert abs(sum(float(r.split(",")[2]) for r in rows[1:]) - 1.0) < 1e-9


def test_backmap_deterministic(workspace, tmp_path, monkeypatch):
    coarse = workspace / "coarse"
    assert main(["--out", str(coarse), "coarsen", "--input", str(workspace / "synth" / "ensemble.pdb"), "--ladder", "calpha", "segments:3"]) == 0
    argv = ["--seed", "7", "--threads", "1", "backmap", "--chain", str(workspace / "train" / "chain"), "--input", str(coarse / "level_2.pdb")]
    for run in ("a", "b"):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / run))
        assert main(argv) == 0
    a, b = _hashes(tmp_path / "a"), _hashes(tmp_path / "b")
    assert a == b and "backmap/backmapped.pdb" in a and "backmap/intermediate_level1.pdb" in a
    top, frames = parse_pdb(tmp_path / "a" / "backmap" / "backmapped.pdb")
    assert len(frames) == 20 and top.n_atoms == 48


def test_backmap_rejects_wrong_level(workspace, tmp_path):
    argv = ["--out", str(tmp_path), "backmap", "--chain", str(workspace / "train" / "chain"), "--input", str(workspace / "synth" / "ensemble.pdb")]
    assert main(argv) == 2


def test_evaluate_sample_count(workspace, tmp_path):
    argv = ["--out", str(tmp_path), "evaluate", "--chain", str(workspace / "train" / "chain"), "--input", str(workspace / "synth" / "ensemble.pdb"), "--seeds", "3"]
    assert main(argv) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    n_test = len(split_indices(20, TrainConfig())[2])
    assert report["n_samples"] == 3 * n_test
    assert {"rmsd_mean", "ged_norm_mean", "clash_mean"} <= set(report)
    assert (tmp_path / "rama_generated.csv").exists()


def test_train_determinism(workspace, tmp_path, monkeypatch):
    argv = ["--config", str(workspace / "tiny.yaml"), "--threads", "1", "train", "--input", str(workspace / "synth" / "ensemble.pdb"), "--epochs", "1", "--one-step"]
    for run in ("a", "b"):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / run))
        assert main(argv) == 0
    a = _hashes(tmp_path / "a")
    assert a == _hashes(tmp_path / "b")
    assert "train/one_step/chain.json" in a and "train/history_step1.tsv" in a


def test_bad_config_field(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema_version: 1\ntrain: {epochs: 0}\n")
    assert main(["--config", str(bad), "--out", str(tmp_path), "train", "--input", str(workspace / "synth" / "ensemble.pdb")]) == 2
    assert "config field train" in capsys.readouterr().err
