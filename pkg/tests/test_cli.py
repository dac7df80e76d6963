import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from contmix.circuits import load_pc
from contmix.cli import run
from contmix.data import BinaryDataset, MissingMask, save_dataset, save_mask
from contmix.synthetic import bernoulli_mixture_pc, split_samples


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    sp = split_samples(bernoulli_mixture_pc(6, 2, seed=0), (300, 100, 100), seed=0)
    for name, data in sp.items():
        save_dataset(data, root / f"{name}.csv")
    return root


@pytest.fixture(scope="module")
def trained_dir(files):
    out = files / "run"
    code = run(["train", "--train", str(files / "train.csv"), "--valid", str(files / "valid.csv"),
                "--out-dir", str(out), "--seed", "0", "--n-points", "16", "--max-epochs", "3",
                "--test", str(files / "test.csv"), "--test-n-points", "32"])
    assert code == 0
    return out


def read_csv(path):
    return list(csv.DictReader(open(path)))


def test_unknown_flag(capsys):
    assert run(["eval", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err


def test_no_subcommand(capsys):
    assert run([]) == 1


def test_clt_without_file(files, tmp_path, capsys):
    code = run(["train", "--train", str(files / "train.csv"), "--valid", str(files / "valid.csv"),
                "--structure", "clt", "--out-dir", str(tmp_path), "--seed", "0"])
    assert code == 1
    assert "--clt-file" in capsys.readouterr().err


def test_missing_seed(files, tmp_path, capsys):
    code = run(["train", "--train", str(files / "train.csv"), "--valid", str(files / "valid.csv"),
                "--out-dir", str(tmp_path)])
    assert code == 1 and "--seed" in capsys.readouterr().err


def test_bad_data_file(files, tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("0,1\n1\n")
    code = run(["train", "--train", str(tmp_path / "bad.csv"), "--valid", str(files / "valid.csv"),
                "--out-dir", str(tmp_path), "--seed", "0"])
    assert code == 2 and "ragged" in capsys.readouterr().err


def test_train_outputs(trained_dir):
    for name in ("decoder.json", "report.csv", "report.json", "manifest.json"):
        assert (trained_dir / name).exists()
    manifest = json.loads((trained_dir / "manifest.json").read_text())
    assert manifest["seeds"]["seed"] == 0 and manifest["config"]["n_points"] == 16
    assert set(manifest["versions"]) >= {"contmix", "numpy", "scipy", "python"}
    assert "32" in json.loads((trained_dir / "report.json").read_text())["test_ll"]


def test_manifest_replays(trained_dir, tmp_path):
    manifest = json.loads((trained_dir / "manifest.json").read_text())
    argv = list(manifest["argv"])
    argv[argv.index("--out-dir") + 1] = str(tmp_path / "again")
    assert run(argv) == 0
    assert (tmp_path / "again" / "decoder.json").read_bytes() == (trained_dir / "decoder.json").read_bytes()


def test_compile_and_eval_agree(files, trained_dir, tmp_path, capsys):
    pc_path = tmp_path / "pc.json"
    assert run(["compile", "--model", str(trained_dir / "decoder.json"), "--out", str(pc_path),
                "--n-points", "32", "--seed", "5", "--rule-out", str(tmp_path / "rule.csv")]) == 0
    assert run(["eval", "--pc", str(pc_path), "--data", str(files / "test.csv"), "--out", str(tmp_path / "a.csv")]) == 0
    assert run(["eval", "--model", str(trained_dir / "decoder.json"), "--data", str(files / "test.csv"),
                "--n-points", "32", "--seed", "5", "--out", str(tmp_path / "b.csv")]) == 0
    a, b = read_csv(tmp_path / "a.csv"), read_csv(tmp_path / "b.csv")
    assert len(a) == 1 and list(a[0]) == ["n_points", "method", "seed", "mean_ll", "stderr"]
    assert float(a[0]["mean_ll"]) == pytest.approx(float(b[0]["mean_ll"]), abs=1e-9)
    assert (tmp_path / "pc.json.manifest.json").exists()


def test_eval_to_stdout(files, trained_dir, tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(["eval", "--model", str(trained_dir / "decoder.json"), "--data", str(files / "test.csv"),
                "--n-points", "16", "64", "--method", "mc", "--seed", "1"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "n_points,method,seed,mean_ll,stderr" and len(lines) == 3
    assert (tmp_path / "contmix-eval.manifest.json").exists()


def test_eval_gh_needs_no_seed(files, trained_dir, tmp_path):
    assert run(["eval", "--model", str(trained_dir / "decoder.json"), "--data", str(files / "test.csv"),
                "--n-points", "81", "--method", "gh", "--out", str(tmp_path / "gh.csv")]) == 0


def test_eval_both_sources(files, trained_dir):
    assert run(["eval", "--data", str(files / "test.csv")]) == 1


def test_compile_latopt(files, trained_dir, tmp_path):
    out = tmp_path / "lo.json"
    assert run(["compile", "--model", str(trained_dir / "decoder.json"), "--out", str(out), "--n-points", "16",
                "--seed", "0", "--latopt", "--train", str(files / "train.csv"), "--valid", str(files / "valid.csv"),
                "--lo-epochs", "2"]) == 0
    assert load_pc(out).metadata["method"] == "latopt"
    assert run(["compile", "--model", str(trained_dir / "decoder.json"), "--out", str(out), "--seed", "0",
                "--latopt"]) == 1


def test_clt_pipeline(files, tmp_path):
    clt = tmp_path / "clt.json"
    assert run(["clt-learn", "--data", str(files / "train.csv"), "--out", str(clt),
                "--pc-out", str(tmp_path / "clt_pc.json")]) == 0
    assert load_pc(tmp_path / "clt_pc.json").structure.kind == "clt"
    assert run(["train", "--train", str(files / "train.csv"), "--valid", str(files / "valid.csv"),
                "--structure", "clt", "--clt-file", str(clt), "--out-dir", str(tmp_path / "r"), "--seed", "0",
                "--n-points", "8", "--max-epochs", "1"]) == 0
    assert run(["baseline", "--train", str(files / "train.csv"), "--valid", str(files / "valid.csv"),
                "--mode", "learnable", "--n-components", "3", "--structure", "clt", "--clt-file", str(clt),
                "--max-epochs", "2", "--seed", "0", "--out", str(tmp_path / "b.json")]) == 0


@pytest.mark.parametrize("mode", ["equal", "learnable", "em"])
def test_baseline(files, tmp_path, mode):
    out = tmp_path / f"{mode}.json"
    assert run(["baseline", "--train", str(files / "train.csv"), "--valid", str(files / "valid.csv"),
                "--mode", mode, "--n-components", "3", "--max-epochs", "5", "--seed", "0", "--out", str(out)]) == 0
    assert load_pc(out).num_components == 3


def test_baseline_needs_valid(files, tmp_path):
    assert run(["baseline", "--train", str(files / "train.csv"), "--mode", "equal", "--n-components", "2",
                "--seed", "0", "--out", str(tmp_path / "x.json")]) == 1


def test_err_est(files, trained_dir, tmp_path):
    out = tmp_path / "err.csv"
    assert run(["err-est", "--model", str(trained_dir / "decoder.json"), "--data", str(files / "test.csv"),
                "--n-points", "8", "64", "--shifts", "4", "--seed", "0", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert [r["n_points"] for r in rows] == ["8", "64"] and all(float(r["stderr"]) >= 0 for r in rows)
    assert run(["err-est", "--model", str(trained_dir / "decoder.json"), "--data", str(files / "test.csv"),
                "--shifts", "1", "--seed", "0", "--out", str(out)]) == 2


def test_sample_and_mpe(files, tmp_path):
    pc_path = tmp_path / "pc.json"
    assert run(["baseline", "--train", str(files / "train.csv"), "--mode", "em", "--n-components", "2",
                "--seed", "0", "--out", str(pc_path)]) == 0
    assert run(["sample", "--pc", str(pc_path), "--count", "50", "--seed", "3", "--out", str(tmp_path / "s.csv")]) == 0
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert len(lines) == 50 and all(len(l.split(",")) == 6 for l in lines)
    assert run(["sample", "--pc", str(pc_path), "--count", "5", "--out", str(tmp_path / "s.csv")]) == 1

    data = BinaryDataset(np.array([[1, 0, 1, 0, 1, 0], [0, 0, 0, 1, 1, 1]]))
    mask = MissingMask(np.array([[1, 1, 0, 0, 1, 1], [1, 1, 1, 1, 1, 1]], dtype=bool))
    save_dataset(data, tmp_path / "d.csv")
    save_mask(mask, tmp_path / "m.csv")
    assert run(["mpe", "--pc", str(pc_path), "--data", str(tmp_path / "d.csv"), "--mask", str(tmp_path / "m.csv"),
                "--out", str(tmp_path / "filled.csv"), "--components-out", str(tmp_path / "c.txt")]) == 0
    filled = np.loadtxt(tmp_path / "filled.csv", delimiter=",", ndmin=2)
    np.testing.assert_array_equal(filled[mask.entries], data.rows[mask.entries])


def test_mpe_mask_mismatch(files, tmp_path):
    pc_path = tmp_path / "pc.json"
    run(["baseline", "--train", str(files / "train.csv"), "--mode", "em", "--n-components", "2", "--seed", "0",
         "--out", str(pc_path)])
    save_mask(MissingMask(np.ones((3, 6), bool)), tmp_path / "m.csv")
    assert run(["mpe", "--pc", str(pc_path), "--data", str(files / "test.csv"), "--mask", str(tmp_path / "m.csv"),
                "--out", str(tmp_path / "f.csv")]) == 2


def test_mask_train(files, tmp_path):
    rng = np.random.default_rng(0)
    save_mask(MissingMask(rng.random((300, 6)) < 0.7), tmp_path / "tm.csv")
    assert run(["mask-train", "--train", str(files / "train.csv"), "--valid", str(files / "valid.csv"),
                "--train-mask", str(tmp_path / "tm.csv"), "--out-dir", str(tmp_path / "r"), "--seed", "0",
                "--n-points", "8", "--max-epochs", "1"]) == 0
    assert json.loads((tmp_path / "r" / "manifest.json").read_text())["masks"]["train_mask"]
    assert run(["mask-train", "--train", str(files / "train.csv"), "--valid", str(files / "valid.csv"),
                "--block-shape", "2", "3", "--image-shape", "2", "3", "--out-dir", str(tmp_path / "r2"),
                "--seed", "0", "--n-points", "8", "--max-epochs", "1"]) == 0
    assert run(["mask-train", "--train", str(files / "train.csv"), "--valid", str(files / "valid.csv"),
                "--out-dir", str(tmp_path / "r3"), "--seed", "0"]) == 1


def test_module_entry_point(files, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "contmix", "eval", "--pc", str(tmp_path / "none.json"),
                           "--data", str(files / "test.csv"), "--out", str(tmp_path / "x.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "error" in proc.stderr
