import json

import numpy as np
import pytest

from logitcorrect import cli, storage
from logitcorrect.experiment import load_split


@pytest.fixture(scope="module")
def tiny(tmp_path_factory, data_dir):
    root = tmp_path_factory.mktemp("tiny")
    for split, n in (("train", 200), ("test", 60)):
        d = load_split(data_dir, split)
        pixels = np.rint(d.images[:n, ..., 0] * 255).astype(np.uint8)
        storage.atomic_write(root / f"{split}-images.idx", storage.encode_idx(pixels))
        storage.atomic_write(root / f"{split}-labels.idx", storage.encode_idx(d.labels[:n].astype(np.uint8)))
    return root


def pipeline(tiny, out, seed=3):
    """Every command once; returns the primary output files."""
    def run(*argv):
        assert cli.main([*argv, "--seed", str(seed)]) == 0
    run("train-classifier", "--data", str(tiny / "train"), "--test", str(tiny / "test"),
        "--epochs", "1", "--out", str(out / "clf"))
    model = str(out / "clf" / "model.ckpt")
    run("build-logits", "--preset", "desk-mnist", "--attack", "pgd", "--model", model,
        "--data", str(tiny / "train"), "--out", str(out / "bl"))
    run("attack", "--preset", "desk-mnist", "--attack", "mim", "--model", model,
        "--data", str(tiny / "test"), "--select-per-class", "2", "--parallelism", "3",
        "--out", str(out / "at"))
    run("train-defender", "--logits", str(out / "bl" / "logits.lgt"), "--epochs", "3",
        "--hidden", "16", "--out", str(out / "def"))
    g, lg = str(out / "def" / "defender.ckpt"), str(out / "at" / "logits.lgt")
    run("evaluate", "--defender", g, "--logits", lg, "--out", str(out / "ev"))
    run("transfer-matrix", "--defender", f"pgd={g}", "--logits", f"mim={lg}", "--out", str(out / "tm"))
    run("analyze", "supporting-classes", "--defender", g, "--logits", lg, "--out", str(out / "sc"))
    run("analyze", "bhattacharyya", "--defender", f"a={g}", "--logits", f"a={lg}",
        "--defender", f"b={g}", "--logits", f"b={out / 'bl' / 'logits.lgt'}", "--out", str(out / "bc"))
    run("analyze", "knockout", "--defender", g, "--logits", lg, "--out", str(out / "ko"))
    run("analyze", "logits-hist", "--logits", lg, "--out", str(out / "lh"))
    return sorted(p.relative_to(out) for p in out.rglob("*")
                  if p.is_file() and p.name != "manifest.json")


@pytest.fixture(scope="module")
def two_runs(tiny, tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    return a, b, pipeline(tiny, a), pipeline(tiny, b)


def test_reruns_are_byte_identical(two_runs):
    a, b, files_a, files_b = two_runs
    assert files_a == files_b and len(files_a) >= 15
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_every_command_writes_a_manifest(two_runs):
    a, _, _, _ = two_runs
    for d in ("clf", "bl", "at", "def", "ev", "tm", "sc", "bc", "ko", "lh"):
        m = json.loads((a / d / "manifest.json").read_text())
        assert m["seed"] == 3 and m["command"].startswith("logitcorrect ")
        assert m["inputs"] and all(len(v["sha256"]) == 64 for v in m["inputs"].values())
        assert m["wall_time_s"] >= 0


def test_knockout_defaults_to_delta_20(two_runs):
    a, _, _, _ = two_runs
    header, row = (a / "ko" / "knockout.csv").read_text().splitlines()[:2]
    assert header.startswith("delta,") and row.startswith("20.0,")


def test_logits_store_checks_classifier_checksum(two_runs):
    a, _, _, _ = two_runs
    _, head = storage.load_logits_store(a / "at" / "logits.lgt", a / "clf" / "model.ckpt")
    assert head["attack"] == "mim"


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["evaluate", "--no-such-flag"])
    assert e.value.code == 2 and "usage" in capsys.readouterr().err


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as e:
        cli.main(["fly"])
    assert e.value.code == 2


def test_runtime_failure_is_one_line(tmp_path, capsys):
    code = cli.main(["evaluate", "--defender", str(tmp_path / "missing.ckpt"),
                     "--logits", str(tmp_path / "missing.lgt"), "--out", str(tmp_path)])
    err = capsys.readouterr().err
    assert code == 1 and err.startswith("error: ") and err.count("\n") == 1


def test_flag_beats_set_beats_config_file(tiny, tmp_path):
    (tmp_path / "c.cfg").write_text("epochs = 2\nbatch_size = 32\nlr = 0.01\n")
    out = tmp_path / "o"
    assert cli.main(["train-classifier", "--data", str(tiny / "train"), "--config", str(tmp_path / "c.cfg"),
                     "--set", "lr=0.002", "--epochs", "1", "--arch", "mlp-2h", "--out", str(out)]) == 0
    cfg = json.loads((out / "manifest.json").read_text())["config"]
    assert cfg["classifier.epochs"] == 1
    assert cfg["classifier.batch_size"] == 32
    assert cfg["classifier.lr"] == 0.002


def test_global_options_before_the_command(tiny, tmp_path):
    assert cli.main(["--seed", "11", "--out", str(tmp_path / "g"), "train-classifier",
                     "--data", str(tiny / "train"), "--epochs", "0", "--arch", "mlp-2h"]) == 0
    assert json.loads((tmp_path / "g" / "manifest.json").read_text())["seed"] == 11
