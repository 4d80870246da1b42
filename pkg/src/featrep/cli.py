"""Command line driver for the training, feature and analysis pipeline.

Every command works inside one run directory (``--out-dir``). Settings come
from an optional JSON plan file; command line flags override plan values.
Each command records its resolved settings in ``manifest.json``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, clustering, deconv, numerics
from .cnn import Checkpoint, NetworkSpec, TrainConfig, accuracy, bagged_predict, builtin_spec, member_seeds, train
from .dataset import LabeledImage, SplitDataset, load_directory, synth_generate
from .errors import BadParam, FeatrepError, MissingCheckpoint
from .features import extract_layers, load_matrix, n_feature_layers, save_matrix
from .forest import ForestConfig, rf_importance, rf_predict, rf_train, significant_fraction
from .svm import DEFAULT_EPOCHS, svm_predict, svm_train_multiclass

log = logging.getLogger("featrep")

CLASSIFIERS = ("rf", "svm_ovr", "svm_ovo")
BUILTIN_SPECS = ("cnn1", "cnn2", "cnn3")

DEFAULT_PLAN = {
    "spec": "cnn1",
    "data": {"synth": {"n_classes": 10, "per_class": 300, "noise": 0.12}},
    "train": {},
    "layers": None,
    "epochs": None,
    "sweep_layer": 3,
    "classifiers": list(CLASSIFIERS),
    "ensemble": 8,
    "forest": {"n_trees": 400},
    "svm": {"c_reg": 1.0, "epochs": DEFAULT_EPOCHS},
    "features_include_validation": True,
    "cluster": {"layer": 3, "linkage": "average", "subset": None, "k": 3, "normalize": False},
    "deconv": {"layer": None, "features": None, "from_cluster": False},
}


# ---------------------------------------------------------------- plan handling

def _merge(base, extra):
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _int_list(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _parse_synth(text):
    try:
        c, n = text.lower().split("x")
        return {"n_classes": int(c), "per_class": int(n)}
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected CLASSESxPER_CLASS, got {text!r}") from None


def resolve_plan(args):
    plan = json.loads(json.dumps(DEFAULT_PLAN))
    if args.plan:
        plan = _merge(plan, json.loads(Path(args.plan).read_text()))
    if args.spec:
        plan["spec"] = args.spec
    if args.synth:
        plan["data"] = {"synth": _merge(plan["data"].get("synth", DEFAULT_PLAN["data"]["synth"]), args.synth)}
    if args.data:
        plan["data"] = {"directory": args.data}
    if args.archive:
        plan["data"] = {"archive": args.archive}
    if args.seed is not None:
        plan["seed"] = args.seed
    plan.setdefault("seed", 0)
    if args.precision:
        plan["train"]["precision"] = args.precision
    if args.epochs is not None:
        plan["train"]["epochs"] = args.epochs
    for key in ("batch_size", "learning_rate"):
        if getattr(args, key, None) is not None:
            plan["train"][key] = getattr(args, key)
    if args.layers:
        plan["layers"] = _int_list(args.layers)
    if args.sweep_epochs:
        plan["epochs"] = _int_list(args.sweep_epochs)
    if args.sweep_layer is not None:
        plan["sweep_layer"] = args.sweep_layer
    if args.classifiers:
        plan["classifiers"] = args.classifiers.split(",")
    if args.ensemble is not None:
        plan["ensemble"] = args.ensemble
    if args.n_trees is not None:
        plan["forest"]["n_trees"] = args.n_trees
    if args.svm_epochs is not None:
        plan["svm"]["epochs"] = args.svm_epochs
    if args.features_include_validation is not None:
        plan["features_include_validation"] = args.features_include_validation
    if args.layer is not None:
        plan["cluster"]["layer"] = args.layer
        plan["deconv"]["layer"] = args.layer
    if args.linkage:
        plan["cluster"]["linkage"] = args.linkage
    if args.subset:
        plan["cluster"]["subset"] = _int_list(args.subset)
    if args.k is not None:
        plan["cluster"]["k"] = args.k
    if getattr(args, "features", None):
        plan["deconv"]["features"] = _int_list(args.features)
    if args.from_cluster:
        plan["deconv"]["from_cluster"] = True
    plan["train"]["seed"] = plan["seed"]
    bad = [c for c in plan["classifiers"] if c not in CLASSIFIERS]
    if bad or not plan["classifiers"]:
        raise BadParam(f"classifiers must be a non-empty subset of {CLASSIFIERS}, got {plan['classifiers']}")
    return plan


def load_spec(ref):
    path = Path(ref)
    if path.is_file():
        return NetworkSpec.load(path)
    if path.parent == Path(".") and path.stem in BUILTIN_SPECS:
        return builtin_spec(path.stem)
    raise FileNotFoundError(f"network spec not found: {ref}")


def load_data(plan, side):
    src = plan["data"]
    if "archive" in src:
        return load_archive(src["archive"])
    if "directory" in src:
        return load_directory(src["directory"], side, seed=plan["seed"])
    p = src["synth"]
    return synth_generate(p["n_classes"], p["per_class"], p.get("side", side), plan["seed"], noise=p.get("noise", 0.12))


def save_archive(data, path):
    tensors = {}
    for name in ("train", "validation", "test"):
        x, y = data.arrays(name)
        tensors[f"{name}_x"] = x
        tensors[f"{name}_y"] = y.astype(np.float64)
    numerics.save_container(path, {"format": "featrep-dataset-1", "class_names": data.class_names}, tensors)


def load_archive(path):
    header, tensors = numerics.load_container(path)
    parts = []
    for name in ("train", "validation", "test"):
        x, y = tensors[f"{name}_x"], tensors[f"{name}_y"].astype(np.int64)
        parts.append([LabeledImage(xi, int(yi)) for xi, yi in zip(x, y)])
    return SplitDataset(*parts, class_names=list(header["class_names"]))


# ---------------------------------------------------------------- run directory

def _version():
    here = Path(__file__).resolve().parent
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                              capture_output=True, text=True, timeout=10)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class Run:
    """Resolved plan, spec and dataset for one command invocation."""

    def __init__(self, args):
        self.args = args
        self.plan = resolve_plan(args)
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.base_spec = load_spec(self.plan["spec"])
        self.cfg = TrainConfig(**self.plan["train"])
        self.seed = int(self.plan["seed"])
        self._data = None

    @property
    def data(self):
        if self._data is None:
            self._data = load_data(self.plan, self.base_spec.input_side)
        return self._data

    @property
    def spec(self):
        return self.base_spec.with_classes(self.data.n_classes)

    @property
    def train_dir(self):
        return self.out / "train"

    def write_manifest(self, command, outputs):
        path = self.out / "manifest.json"
        doc = json.loads(path.read_text()) if path.exists() else {}
        doc["version"] = _version()
        doc.setdefault("commands", {})[command] = {
            "plan": self.plan,
            "train_config": self.cfg.to_dict(),
            "spec": self.base_spec.name,
            "seed": self.seed,
            "outputs": sorted(str(Path(o).relative_to(self.out)) for o in outputs),
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def checkpoint(self, epoch=None):
        epoch = self.cfg.epochs if epoch is None else epoch
        path = Path(self.args.checkpoint) if getattr(self.args, "checkpoint", None) and epoch == self.cfg.epochs \
            else self.train_dir / f"epoch_{epoch:03d}.ckpt"
        if not path.is_file():
            raise MissingCheckpoint(f"no checkpoint for epoch {epoch} at {path}; run `train` first")
        return Checkpoint.load(path)

    def feature_split(self):
        return "train+val" if self.plan["features_include_validation"] else "train"

    def layers(self):
        n = n_feature_layers(self.spec)
        layers = self.plan["layers"] if self.plan["layers"] is not None else list(range(n + 1))
        if not layers:
            raise BadParam("layer list is empty")
        return layers

    def features(self, ckpt, layers):
        tr = extract_layers(ckpt, self.data.split(self.feature_split()), layers)
        te = extract_layers(ckpt, self.data.split("test"), layers)
        return tr, te


# ---------------------------------------------------------------- sweep cells

def _fit_score(task):
    """One (classifier, train matrix, test matrix) cell; returns test accuracy."""
    kind, tr, te, n_classes, forest_cfg, svm_cfg, seed = task
    if kind == "rf":
        model = rf_train(tr, ForestConfig(seed=seed, **forest_cfg), n_classes=n_classes)
        pred = rf_predict(model, te.values)[0]
    else:
        mode = "one_vs_rest" if kind == "svm_ovr" else "one_vs_one"
        model = svm_train_multiclass(tr, mode, n_classes=n_classes, seed=seed, **svm_cfg)
        pred = svm_predict(model, te.values)
    return float(np.mean(pred == te.labels)) if len(te.labels) else float("nan")


def run_cells(tasks, jobs):
    """Evaluate cells, in parallel when ``jobs > 1``; results keep task order."""
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_fit_score, tasks))
    return [_fit_score(t) for t in tasks]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return repr(float(x))


# ---------------------------------------------------------------- commands

def cmd_synth(run):
    path = run.out / "dataset.cptc"
    save_archive(run.data, path)
    manifest = run.out / "dataset_manifest.csv"
    run.data.write_manifest(manifest)
    return [path, manifest]


def cmd_train(run):
    result = train(run.spec, run.data, run.cfg, out_dir=run.train_dir)
    print(f"trained {run.spec.name} for {run.cfg.epochs} epochs; final val_acc "
          f"{result.metrics[-1]['val_acc']:.4f}")
    return [run.train_dir / f"epoch_{c.epoch:03d}.ckpt" for c in result.checkpoints] + [run.train_dir / "metrics.csv"]


def cmd_extract(run):
    ckpt = run.checkpoint(run.args.epoch)
    if run.args.out:
        # single matrix: --layer K --split NAME --out FILE
        k = run.args.layer if run.args.layer is not None else n_feature_layers(run.spec)
        m = extract_layers(ckpt, run.data.split(run.args.split), [k])[k]
        save_matrix(m, run.args.out)
        return []
    layers = run.layers()
    tr, te = run.features(ckpt, layers)
    out_dir = run.out / "features" / f"epoch_{ckpt.epoch:03d}"
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for k in layers:
        for tag, m in (("train", tr[k]), ("test", te[k])):
            path = out_dir / f"layer_{k}_{tag}.cpt"
            save_matrix(m, path)
            outputs += [path, Path(str(path) + ".json")]
    return outputs


def cmd_layer_sweep(run):
    ckpt = run.checkpoint()
    layers = run.layers()
    tr, te = run.features(ckpt, layers)
    c = run.spec.n_classes
    cells = [(k, kind) for k in layers for kind in run.plan["classifiers"]]
    tasks = [(kind, tr[k], te[k], c, run.plan["forest"], run.plan["svm"], run.seed) for k, kind in cells]
    scores = run_cells(tasks, run.args.jobs)
    x_te, y_te = run.data.arrays("test")
    rows = [[k, kind, _fmt(s)] for (k, kind), s in zip(cells, scores)]
    rows.append(["baseline", "cnn", _fmt(accuracy(ckpt, x_te[:, None], y_te))])
    path = run.out / "layer_sweep.csv"
    _write_csv(path, ["layer", "classifier", "test_accuracy"], rows)
    return [path]


def cmd_epoch_sweep(run):
    epochs = run.plan["epochs"] if run.plan["epochs"] is not None else [0, run.cfg.epochs // 2, run.cfg.epochs]
    if not epochs:
        raise BadParam("epoch list is empty")
    k = run.plan["sweep_layer"]
    ckpts = [run.checkpoint(e) for e in epochs]
    x_te, y_te = run.data.arrays("test")
    c = run.spec.n_classes
    tasks, base = [], []
    for ck in ckpts:
        tr, te = run.features(ck, [k])
        tasks += [(kind, tr[k], te[k], c, run.plan["forest"], run.plan["svm"], run.seed)
                  for kind in ("rf", "svm_ovr")]
        base.append(accuracy(ck, x_te[:, None], y_te))
    scores = run_cells(tasks, run.args.jobs)
    rows = [[e, _fmt(b), _fmt(scores[2 * i]), _fmt(scores[2 * i + 1])] for i, (e, b) in enumerate(zip(epochs, base))]
    path = run.out / "epoch_sweep.csv"
    _write_csv(path, ["epoch", "cnn_acc", "rf_acc", "svm_acc"], rows)
    return [path]


def _bag_member(task):
    spec, data, cfg_dict, out_dir = task
    result = train(spec, data, TrainConfig(**cfg_dict), out_dir=None)
    final = result.final
    final.save(Path(out_dir) / "final.ckpt")
    return final


def cmd_bag(run):
    k = int(run.plan["ensemble"])
    if k < 1:
        raise BadParam("ensemble size must be >= 1")
    seeds = member_seeds(run.seed, k)
    tasks = []
    for i, s in enumerate(seeds):
        d = run.out / "bag" / f"member_{i}"
        d.mkdir(parents=True, exist_ok=True)
        tasks.append((run.spec, run.data, dict(run.cfg.to_dict(), seed=s), d))
    if run.args.jobs > 1 and k > 1:
        with ProcessPoolExecutor(max_workers=run.args.jobs) as pool:
            members = list(pool.map(_bag_member, tasks))
    else:
        members = [_bag_member(t) for t in tasks]
    x_te, y_te = run.data.arrays("test")
    single = [accuracy(m, x_te[:, None], y_te) for m in members]
    bagged = float(np.mean(bagged_predict(members, x_te[:, None]) == y_te))
    report = {
        "ensemble_size": k,
        "member_seeds": seeds,
        "member_accuracy": single,
        "mean_single_accuracy": float(np.mean(single)),
        "bagged_accuracy": bagged,
    }
    path = run.out / "bag" / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return [path] + [t[3] / "final.ckpt" for t in tasks]


def cmd_importance(run):
    ckpt = run.checkpoint()
    layers = [k for k in run.layers()]
    tr, _ = run.features(ckpt, layers)
    out_dir = run.out / "importance"
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs, rows = [], []
    for k in layers:
        model = rf_train(tr[k], ForestConfig(seed=run.seed, **run.plan["forest"]), n_classes=run.spec.n_classes)
        report = rf_importance(model, tr[k])
        path = out_dir / f"layer_{k}.csv"
        report.write_csv(path)
        outputs.append(path)
        rows.append([k, tr[k].n_features, _fmt(report.threshold), _fmt(significant_fraction(report))])
    summary = out_dir / "summary.csv"
    _write_csv(summary, ["layer", "n_features", "threshold", "significant_fraction"], rows)
    return outputs + [summary]


def _cluster_layer(run):
    k = run.plan["cluster"]["layer"]
    return min(3, n_feature_layers(run.spec)) if k is None else int(k)


def _centroid_set(run, ckpt, k):
    tr = extract_layers(ckpt, run.data.split(run.feature_split()), [k])[k]
    return clustering.centroids(tr, run.spec.n_classes, run.data.class_names)


def _shared(run, cs):
    opts = run.plan["cluster"]
    if opts.get("normalize"):
        cs = clustering.max_normalize(cs)
    return clustering.top_shared_features(cs, opts["subset"], opts["k"])


def cmd_cluster(run):
    ckpt = run.checkpoint()
    opts = run.plan["cluster"]
    k = _cluster_layer(run)
    cs = _centroid_set(run, ckpt, k)
    tree = clustering.agglomerate(cs, opts["linkage"])
    out_dir = run.out / "cluster"
    out_dir.mkdir(parents=True, exist_ok=True)
    nwk, merges = out_dir / f"layer_{k}.nwk", out_dir / f"layer_{k}_merges.csv"
    clustering.write_newick(tree, nwk)
    clustering.write_merge_csv(tree, merges)
    outputs = [nwk, merges]
    if opts["subset"]:
        top = _shared(run, cs)
        path = out_dir / f"layer_{k}_shared.csv"
        _write_csv(path, ["rank", "feature_index"], list(enumerate(top)))
        outputs.append(path)
    return outputs


def cmd_deconv(run):
    ckpt = run.checkpoint()
    opts = run.plan["deconv"]
    if opts["from_cluster"]:
        k = _cluster_layer(run)
        subset = run.plan["cluster"]["subset"]
        if not subset:
            raise BadParam("--from-cluster needs a class subset (--subset)")
        feats = _shared(run, _centroid_set(run, ckpt, k))
    else:
        k = opts["layer"] if opts["layer"] is not None else 1
        feats = opts["features"] or [0]
    x_te, _ = run.data.arrays("test")
    out_dir = run.out / "deconv"
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for f in feats:
        (sample, _), = deconv.top_activating_samples(ckpt, x_te, k, f, 1)
        rec = deconv.record_forward(ckpt, x_te[sample])
        proj = deconv.project(ckpt, rec, k, f, sample_id=sample)
        path = out_dir / f"layer_{k}_feature_{f}.pgm"
        proj.write_pgm(path)
        outputs += [path, Path(str(path) + ".json")]
    return outputs


def cmd_svm(run):
    """Fit a multiclass SVM on a saved feature matrix; score it on ``--test`` when given."""
    if not run.args.features_file:
        raise BadParam("svm needs --features FILE (a matrix written by extract)")
    tr = load_matrix(run.args.features_file)
    mode = {"ovr": "one_vs_rest", "ovo": "one_vs_one"}[run.args.mode]
    c_reg = run.args.c if run.args.c is not None else run.plan["svm"]["c_reg"]
    n_classes = int(tr.labels.max()) + 1
    te = load_matrix(run.args.test) if run.args.test else None
    if te is not None:
        n_classes = max(n_classes, int(te.labels.max(initial=-1)) + 1)
    model = svm_train_multiclass(tr, mode, c_reg=c_reg, epochs=run.plan["svm"]["epochs"],
                                 n_classes=n_classes, seed=run.seed)
    out_dir = run.out / "svm"
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"model_{run.args.mode}.json"
    model.save(path)
    outputs = [path, Path(str(path) + ".bin")]
    if te is not None:
        acc = float(np.mean(svm_predict(model, te.values) == te.labels))
        score = out_dir / f"score_{run.args.mode}.csv"
        _write_csv(score, ["mode", "c_reg", "n_train", "n_test", "test_accuracy"],
                   [[run.args.mode, _fmt(c_reg), tr.n_samples, te.n_samples, _fmt(acc)]])
        print(f"{run.args.mode} test accuracy {acc:.4f}")
        outputs.append(score)
    return outputs


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "extract": cmd_extract,
    "layer-sweep": cmd_layer_sweep,
    "epoch-sweep": cmd_epoch_sweep,
    "bag": cmd_bag,
    "importance": cmd_importance,
    "cluster": cmd_cluster,
    "deconv": cmd_deconv,
    "svm": cmd_svm,
}


# ---------------------------------------------------------------- argument parsing

def _add_common(sp, command):
    g = sp.add_argument_group("global")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out-dir", default="run")
    g.add_argument("--precision", choices=("f32", "f64"), default=None)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--plan", help="JSON plan file")
    g.add_argument("--spec", help="network spec JSON, or cnn1 / cnn2 / cnn3")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--synth", type=_parse_synth, metavar="CxN", help="synthetic data, e.g. 10x300")
    src.add_argument("--data", metavar="DIR", help="image directory with one sub-directory per class")
    src.add_argument("--archive", metavar="FILE", help="dataset written by the synth command")
    g.add_argument("--epochs", type=int, default=None, help="training epochs")
    g.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    g.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    g.add_argument("--checkpoint", "--ckpt", dest="checkpoint", help="checkpoint to analyse instead of the final training epoch")
    g.add_argument("--layers", help="comma separated feature layers")
    g.add_argument("--sweep-epochs", help="comma separated epochs for epoch-sweep")
    g.add_argument("--sweep-layer", type=int, default=None)
    g.add_argument("--classifiers", help="comma separated subset of rf,svm_ovr,svm_ovo")
    g.add_argument("--ensemble", type=int, default=None)
    g.add_argument("--n-trees", dest="n_trees", type=int, default=None)
    g.add_argument("--svm-epochs", dest="svm_epochs", type=int, default=None)
    g.add_argument("--features-include-validation", action=argparse.BooleanOptionalAction, default=None,
                   help="fit feature classifiers on train+validation (default) or train only")
    g.add_argument("--layer", type=int, default=None, help="feature layer for cluster / deconv")
    g.add_argument("--linkage", choices=clustering.LINKAGES, default=None)
    g.add_argument("--subset", help="comma separated class ids for shared features")
    g.add_argument("--k", type=int, default=None, help="number of shared features")
    if command == "svm":
        s = sp.add_argument_group("svm")
        s.add_argument("--mode", choices=("ovr", "ovo"), default="ovr")
        s.add_argument("--c", type=float, default=None, help="soft-margin constant (default 1.0)")
        s.add_argument("--features", dest="features_file", metavar="FILE", help="training feature matrix")
        s.add_argument("--test", metavar="FILE", help="feature matrix to score")
    else:
        g.add_argument("--features", help="comma separated feature indices for deconv")
    g.add_argument("--from-cluster", action="store_true", help="deconv the top shared features of --subset")
    g.add_argument("--epoch", type=int, default=None, help="checkpoint epoch for extract")
    g.add_argument("--split", default="train+val", help="split for single-matrix extract")
    g.add_argument("--out", help="single-matrix extract: output file")
    sp.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="featrep", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _add_common(sub.add_parser(name), name)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run = Run(args)
        outputs = COMMANDS[args.command](run)
        run.write_manifest(args.command, outputs)
    except (FeatrepError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"featrep {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
