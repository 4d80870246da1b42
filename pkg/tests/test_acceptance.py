"""Acceptance criteria 1-8, each printed as one PASS/FAIL line.

Criteria 4-7 share one seeded experiment driven through the command line:
seed 0, 10 synthetic classes x 300 images at 28x28, CNN1, 30 epochs,
400-tree forests and an 8-member bag. It takes roughly 20 minutes on one
CPU core. Set FEATREP_ACCEPTANCE_DIR to keep the run directory.
"""
import csv
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from featrep.cli import main
from featrep.cnn import builtin_spec, conv_forward, extraction_points, init_weights, shape_plan
from featrep.deconv import project_map, record_forward
from featrep.forest import grow_tree
from featrep.clustering import LINKAGES, CentroidSet, agglomerate

from gradcheck import DROPOUT_CASE, DROPOUT_LAYERS, LAYER_CASES, check_kink_free
from test_clustering import naive_agglomerate
from test_cnn import naive_conv
from test_forest import audit_tree

SEED = 0
EPOCHS = 30
N_CLASSES = 10

# every "Output Shape" cell, in layer order; None where the table leaves the cell blank
TABLES = {
    "cnn1": [("conv", None), ("maxpool", (32, 12, 12)), ("conv", None), ("maxpool", (48, 4, 4)),
             ("conv", None), ("maxpool", (64, 1, 1)), ("fully_connected", (121,)), ("softmax", (121,))],
    "cnn2": [("conv", (32, 36, 36)), ("conv", None), ("maxpool", (32, 16, 16)), ("conv", (48, 12, 12)),
             ("conv", None), ("maxpool", (48, 4, 4)), ("conv", None), ("maxpool", (64, 1, 1)),
             ("fully_connected", (121,)), ("softmax", (121,))],
    "cnn3": [("conv", None), ("maxpool", (48, 10, 10)), ("conv", None), ("maxpool", (48, 4, 4)),
             ("conv", None), ("maxpool", (24, 3, 3)), ("softmax", (121,))],
}


def verdict(number, ok, text):
    line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {text}"
    print("\n" + line, flush=True)
    with open(Path(os.environ.get("FEATREP_ACCEPTANCE_LOG", os.devnull)), "a") as fh:
        fh.write(line + "\n")
    assert ok, line


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    out = Path(os.environ.get("FEATREP_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("acceptance"))
    base = ["--seed", str(SEED), "--out-dir", str(out), "--spec", "cnn1", "--synth", f"{N_CLASSES}x300",
            "--epochs", str(EPOCHS), "--n-trees", "400"]
    steps = [
        ["train"],
        ["layer-sweep"],
        ["epoch-sweep", "--sweep-epochs", f"0,{EPOCHS // 2},{EPOCHS}", "--sweep-layer", "3"],
        ["importance", "--layers", "3,4"],
        ["bag", "--ensemble", "8"],
    ]
    t0 = time.time()
    for step in steps:
        assert main(step[:1] + base + step[1:]) == 0, step
    sweep = {(r["layer"], r["classifier"]): float(r["test_accuracy"]) for r in read_csv(out / "layer_sweep.csv")}
    return {
        "dir": out,
        "sweep": sweep,
        "epochs": {int(r["epoch"]): r for r in read_csv(out / "epoch_sweep.csv")},
        "importance": {int(r["layer"]): float(r["significant_fraction"])
                       for r in read_csv(out / "importance" / "summary.csv")},
        "bag": json.loads((out / "bag" / "report.json").read_text()),
        "seconds": time.time() - t0,
    }


def test_criterion_1_shape_fidelity():
    t0 = time.time()
    bad = []
    for name, table in TABLES.items():
        spec = builtin_spec(name)
        plan = shape_plan(spec)
        kinds = [l.kind for l in spec.layers]
        if kinds != [k for k, _ in table]:
            bad.append(f"{name} layer kinds {kinds}")
            continue
        bad += [f"{name} layer {i}: {got} != {want}"
                for i, ((_, want), got) in enumerate(zip(table, plan)) if want is not None and tuple(got) != want]
    sides = (builtin_spec("cnn1").input_side, builtin_spec("cnn2").input_side, builtin_spec("cnn3").input_side)
    if sides != (28, 40, 28):
        bad.append(f"input sides {sides}")
    dt = time.time() - t0
    verdict(1, not bad and dt < 1.0, f"shape plans match every table cell ({dt:.3f}s) {bad or ''}")


def test_criterion_2_gradients():
    t0 = time.time()
    worst = {}
    for name, spec in LAYER_CASES.items():
        worst[name] = max(check_kink_free(spec).values())
    worst["dropout (fixed mask)"] = max(check_kink_free(DROPOUT_CASE, DROPOUT_LAYERS).values())
    dt = time.time() - t0
    top = max(worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, top < 1e-4 and dt < 60, f"max relative error {top:.2e} < 1e-4 in {dt:.1f}s ({detail})")


def test_criterion_3_oracles():
    t0 = time.time()
    rng = np.random.default_rng(0)
    errs = {}
    # (a) convolution and matrix product against nested loops
    conv = 0.0
    for stride, pad in [((1, 1), (0, 0)), ((2, 2), (1, 1)), ((1, 2), (2, 0))]:
        x = rng.normal(size=(2, 3, 9, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        got = conv_forward(x, w, b, stride, pad)[0]
        conv = max(conv, float(np.abs(got - naive_conv(x, w, b, stride, pad)).max()))
    a, m = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    loops = np.array([[sum(a[i, k] * m[k, j] for k in range(7)) for j in range(3)] for i in range(5)])
    errs["conv/matmul"] = max(conv, float(np.abs(a @ m - loops).max()))
    ok_a = errs["conv/matmul"] < 1e-12
    # (b) every CART split attains the exhaustive best Gini decrease
    ok_b = True
    for seed in range(20):
        r = np.random.default_rng(seed)
        c, d = 2 + seed % 3, 1 + seed % 4
        x, y = r.normal(size=(20, d)), r.integers(0, c, 20)
        try:
            audit_tree(grow_tree(x, y, c, max_features=d, seed=seed), x, y, c)
        except AssertionError:
            ok_b = False
    # (c) agglomeration equals naive recomputation for every linkage and C <= 6
    ok_c = True
    for c in range(2, 7):
        for linkage in LINKAGES:
            for seed in range(5):
                x = np.random.default_rng(100 * c + seed).normal(size=(c, 3))
                got = agglomerate(CentroidSet(x, [str(i) for i in range(c)]), linkage).merges
                want = naive_agglomerate(x, linkage)
                same = [g[:2] + g[3:] for g in got] == [w[:2] + w[3:] for w in want]
                close = np.allclose([g[2] for g in got], [w[2] for w in want], rtol=0, atol=1e-12)
                ok_c = ok_c and same and close
    # (d) back-projection is the adjoint of the gated forward chain
    adj = 0.0
    for name in ("cnn1", "cnn2", "cnn3"):
        spec = builtin_spec(name).with_classes(5)
        ck = init_weights(spec, 1)
        for k in ck.params:
            if k.endswith(".b"):
                ck.params[k][:] = 0.0
        img = rng.random((spec.input_side, spec.input_side))
        rec = record_forward(ck, img)
        for k in range(1, len(extraction_points(spec)) + 1):
            feat = rec.fwd.feature(k)[0]
            y = rng.normal(size=feat.shape)
            lhs = float(np.sum(feat * y))
            adj = max(adj, abs(lhs - float(np.sum(img * project_map(ck, rec, k, y)))) / max(1.0, abs(lhs)))
    errs["deconv adjoint"] = adj
    ok_d = adj < 1e-8
    dt = time.time() - t0
    verdict(3, ok_a and ok_b and ok_c and ok_d and dt < 120,
            f"(a) conv/matmul {errs['conv/matmul']:.1e} (b) CART {'ok' if ok_b else 'MISMATCH'} "
            f"(c) HAC {'ok' if ok_c else 'MISMATCH'} (d) adjoint {adj:.1e} in {dt:.1f}s")


def test_criterion_4_layer_trend(experiment):
    s = experiment["sweep"]
    cnn = s[("baseline", "cnn")]
    feats = {k: v for k, v in s.items() if k[0] != "baseline"}
    best_key = max(feats, key=feats.get)
    a = feats[best_key] >= cnn - 0.01
    b = s[("3", "rf")] > s[("1", "rf")]
    c = all(s[("0", kind)] < s[("3", kind)] for kind in ("rf", "svm_ovr", "svm_ovo"))
    rows = " ".join(f"L{k}:" + "/".join(f"{s[(str(k), c_)]:.3f}" for c_ in ("rf", "svm_ovr", "svm_ovo"))
                    for k in range(5))
    verdict(4, a and b and c,
            f"(a) best {best_key} {feats[best_key]:.4f} >= cnn {cnn:.4f} - 0.01: {a}; "
            f"(b) rf L3 {s[('3', 'rf')]:.4f} > rf L1 {s[('1', 'rf')]:.4f}: {b}; "
            f"(c) L0 < L3 for rf/ovr/ovo: {c} [{rows}] ({experiment['seconds'] / 60:.1f} min)")


def test_criterion_5_epoch_trend(experiment):
    e = experiment["epochs"]
    half, final, zero = (float(e[k]["rf_acc"]) for k in (EPOCHS // 2, EPOCHS, 0))
    chance = 1.0 / N_CLASSES
    a = half >= 0.9 * final
    b = zero > 3 * chance
    verdict(5, a and b, f"rf@{EPOCHS // 2} {half:.4f} >= 0.9 x rf@{EPOCHS} {final:.4f}: {a}; "
                        f"rf@0 {zero:.4f} > 3 x chance {3 * chance:.2f}: {b}")


def test_criterion_6_importance(experiment):
    frac = experiment["importance"]
    verdict(6, frac[4] < frac[3],
            f"significant fraction FC (layer 4) {frac[4]:.4f} < last conv (layer 3) {frac[3]:.4f}")


def test_criterion_7_bagging(experiment):
    rep = experiment["bag"]
    ok = rep["ensemble_size"] == 8 and rep["bagged_accuracy"] >= rep["mean_single_accuracy"]
    verdict(7, ok, f"8-member bagged {rep['bagged_accuracy']:.4f} >= mean single "
                   f"{rep['mean_single_accuracy']:.4f} (members {', '.join(f'{a:.3f}' for a in rep['member_accuracy'])})")


def test_criterion_8_determinism(tmp_path):
    """Every command, run twice from the same plan and seed, writes identical bytes."""
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({
        "spec": "cnn1", "seed": 3, "data": {"synth": {"n_classes": 4, "per_class": 12}},
        "train": {"epochs": 4, "batch_size": 16}, "ensemble": 2, "forest": {"n_trees": 20},
        "svm": {"epochs": 10}, "cluster": {"layer": 3, "subset": [0, 2], "k": 3},
    }))
    commands = [
        ["synth"], ["train"], ["extract", "--layers", "0,3"], ["layer-sweep"],
        ["epoch-sweep", "--sweep-epochs", "0,2,4"], ["bag"], ["importance"], ["cluster"],
        ["deconv", "--from-cluster"], ["deconv", "--layer", "1", "--features", "0,5"],
        ["svm", "--mode", "ovo", "--features", "{out}/features/epoch_004/layer_3_train.cpt",
         "--test", "{out}/features/epoch_004/layer_3_test.cpt"],
    ]
    snapshots = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        for cmd in commands:
            args = [a.format(out=out) for a in cmd]
            assert main(args[:1] + ["--plan", str(plan), "--out-dir", str(out)] + args[1:]) == 0, cmd
        snapshots.append({p.relative_to(out).as_posix(): p.read_bytes()
                          for p in sorted(out.rglob("*")) if p.is_file()})
    a, b = snapshots
    differing = sorted(k for k in a if a.get(k) != b.get(k)) + sorted(set(b) - set(a))
    kinds = {Path(k).suffix for k in a}
    verdict(8, not differing and {".csv", ".nwk", ".pgm"} <= kinds,
            f"{len(a)} files from {len(commands)} commands byte-identical across reruns"
            + (f"; differing: {differing}" if differing else ""))
