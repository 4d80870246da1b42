import csv
import json
import re

import pytest

from featrep.cli import load_archive, main
from featrep.cnn import Checkpoint, accuracy

EPOCHS = 30


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    out = root / "run"
    assert main(["synth", "--synth", "3x12", "--seed", "0", "--out-dir", str(out)]) == 0
    base = ["--archive", str(out / "dataset.cptc"), "--out-dir", str(out), "--seed", "0",
            "--epochs", str(EPOCHS), "--n-trees", "15", "--svm-epochs", "10"]
    assert main(["train"] + base) == 0
    return out, base


def cli(cmd, base, *extra):
    return main([cmd] + list(base) + list(extra))


class TestTrain:
    def test_one_checkpoint_per_epoch_plus_init(self, run):
        out, _ = run
        ckpts = sorted(p.name for p in (out / "train").glob("epoch_*.ckpt"))
        assert ckpts == [f"epoch_{e:03d}.ckpt" for e in range(EPOCHS + 1)]
        rows = read_csv(out / "train" / "metrics.csv")
        assert [int(r["epoch"]) for r in rows] == list(range(EPOCHS + 1))

    def test_rerun_is_identical(self, run, tmp_path):
        out, base = run
        again = tmp_path / "again"
        args = [a if a != str(out) else str(again) for a in base]
        assert cli("train", args) == 0
        assert (again / "train" / "metrics.csv").read_bytes() == (out / "train" / "metrics.csv").read_bytes()
        for e in (0, EPOCHS):
            name = f"epoch_{e:03d}.ckpt"
            assert (again / "train" / name).read_bytes() == (out / "train" / name).read_bytes()

    def test_missing_spec(self, run, tmp_path, capsys):
        _, base = run
        rc = cli("train", base, "--spec", str(tmp_path / "nope.json"), "--out-dir", str(tmp_path))
        assert rc != 0
        assert "error" in capsys.readouterr().err

    def test_builtin_spec_by_file_name(self, run, tmp_path):
        out, _ = run
        rc = main(["train", "--archive", str(out / "dataset.cptc"), "--spec", "cnn1.json", "--epochs", "1",
                   "--out-dir", str(tmp_path)])
        assert rc == 0

    def test_manifest(self, run):
        out, _ = run
        doc = json.loads((out / "manifest.json").read_text())
        assert doc["version"]
        entry = doc["commands"]["train"]
        assert entry["seed"] == 0 and entry["plan"]["train"]["epochs"] == EPOCHS
        assert "train/metrics.csv" in entry["outputs"]


class TestSweeps:
    def test_layer_sweep(self, run):
        out, base = run
        assert cli("layer-sweep", base) == 0
        rows = read_csv(out / "layer_sweep.csv")
        assert len(rows) == 5 * 3 + 1
        assert {r["classifier"] for r in rows[:-1]} == {"rf", "svm_ovr", "svm_ovo"}
        assert rows[-1]["layer"] == "baseline" and rows[-1]["classifier"] == "cnn"
        data = load_archive(out / "dataset.cptc")
        x, y = data.arrays("test")
        ck = Checkpoint.load(out / "train" / f"epoch_{EPOCHS:03d}.ckpt")
        assert float(rows[-1]["test_accuracy"]) == accuracy(ck, x[:, None], y)

    def test_layer_sweep_parallel_identical(self, run, tmp_path):
        out, base = run
        assert cli("layer-sweep", base, "--layers", "0,3", "--jobs", "2") == 0
        par = (out / "layer_sweep.csv").read_bytes()
        assert cli("layer-sweep", base, "--layers", "0,3") == 0
        assert (out / "layer_sweep.csv").read_bytes() == par

    def test_epoch_sweep(self, run):
        out, base = run
        assert cli("epoch-sweep", base, "--sweep-epochs", "0,5,30") == 0
        rows = read_csv(out / "epoch_sweep.csv")
        assert [r["epoch"] for r in rows] == ["0", "5", "30"]
        assert list(rows[0]) == ["epoch", "cnn_acc", "rf_acc", "svm_acc"]

    def test_epoch_sweep_missing_checkpoint(self, run, capsys):
        _, base = run
        assert cli("epoch-sweep", base, "--sweep-epochs", "0,31") != 0
        assert "epoch 31" in capsys.readouterr().err


class TestBag:
    def test_single_member(self, run, tmp_path):
        out, base = run
        args = [a if a != str(out) else str(tmp_path) for a in base]
        assert cli("bag", args, "--ensemble", "1", "--epochs", "3") == 0
        rep = json.loads((tmp_path / "bag" / "report.json").read_text())
        assert rep["ensemble_size"] == 1 and len(rep["member_seeds"]) == 1
        assert rep["bagged_accuracy"] == rep["mean_single_accuracy"] == rep["member_accuracy"][0]

    def test_member_seeds_recorded(self, run, tmp_path):
        out, base = run
        args = [a if a != str(out) else str(tmp_path) for a in base]
        assert cli("bag", args, "--ensemble", "3", "--epochs", "2") == 0
        rep = json.loads((tmp_path / "bag" / "report.json").read_text())
        assert len(set(rep["member_seeds"])) == 3
        assert all((tmp_path / "bag" / f"member_{i}" / "final.ckpt").is_file() for i in range(3))

    def test_empty_ensemble(self, run, tmp_path):
        out, base = run
        args = [a if a != str(out) else str(tmp_path) for a in base]
        assert cli("bag", args, "--ensemble", "0") != 0


class TestAnalysis:
    def test_importance_per_layer(self, run):
        out, base = run
        assert cli("importance", base) == 0
        for k in range(5):
            assert (out / "importance" / f"layer_{k}.csv").is_file()
        summary = read_csv(out / "importance" / "summary.csv")
        assert [int(r["layer"]) for r in summary] == list(range(5))
        assert [int(r["n_features"]) for r in summary] == [784, 4608, 768, 64, 121]

    def test_cluster_leaves(self, run):
        out, base = run
        assert cli("cluster", base, "--subset", "0,1", "--k", "3") == 0
        text = (out / "cluster" / "layer_3.nwk").read_text().strip()
        leaves = re.findall(r"[(,]([^(),:;]+):", text)
        assert sorted(leaves) == sorted(load_archive(out / "dataset.cptc").class_names)
        assert len(read_csv(out / "cluster" / "layer_3_merges.csv")) == 2
        assert len(read_csv(out / "cluster" / "layer_3_shared.csv")) == 3

    def test_deconv_from_cluster(self, run):
        out, base = run
        assert cli("deconv", base, "--from-cluster", "--subset", "0,1", "--k", "3") == 0
        shared = [int(r["feature_index"]) for r in read_csv(out / "cluster" / "layer_3_shared.csv")]
        pgms = sorted((out / "deconv").glob("layer_3_feature_*.pgm"))
        assert sorted(int(p.stem.rsplit("_", 1)[1]) for p in pgms) == sorted(shared)
        for p in pgms:
            assert p.read_bytes().startswith(b"P5\n28 28\n255\n")
            assert json.loads((p.parent / (p.name + ".json")).read_text())["layer"] == 3

    def test_deconv_bad_layer(self, run, capsys):
        _, base = run
        assert cli("deconv", base, "--layer", "9", "--features", "0") != 0
        assert "layer 9" in capsys.readouterr().err

    def test_extract_and_svm(self, run):
        out, base = run
        assert cli("extract", base, "--layers", "3") == 0
        feat = out / "features" / f"epoch_{EPOCHS:03d}"
        assert cli("svm", base, "--mode", "ovo", "--features", str(feat / "layer_3_train.cpt"),
                   "--test", str(feat / "layer_3_test.cpt")) == 0
        row = read_csv(out / "svm" / "score_ovo.csv")[0]
        assert 0.0 <= float(row["test_accuracy"]) <= 1.0
        assert (out / "svm" / "model_ovo.json").is_file()


class TestDeterminism:
    def test_analysis_outputs_repeat_byte_for_byte(self, run):
        out, base = run
        files = {
            "importance": ["importance/layer_3.csv", "importance/summary.csv"],
            "cluster": ["cluster/layer_3.nwk", "cluster/layer_3_merges.csv"],
            "deconv": ["deconv/layer_2_feature_1.pgm"],
        }
        extra = {"importance": ["--layers", "3"], "cluster": [], "deconv": ["--layer", "2", "--features", "1"]}
        for cmd, paths in files.items():
            assert cli(cmd, base, *extra[cmd]) == 0
            first = [(out / p).read_bytes() for p in paths]
            assert cli(cmd, base, *extra[cmd]) == 0
            assert [(out / p).read_bytes() for p in paths] == first, cmd
