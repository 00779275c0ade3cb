"""``cardamage`` command-line front end.

Every subcommand takes a flat set of keys, each available as a ``--key``
flag and as an entry of a ``--config`` JSON file (flags win). The fully
resolved configuration is logged to stderr and written to
``<out>/resolved_config.json``. Exit status is 0 on success, 2 for usage or
configuration errors and 1 for failures while running.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from .cnn import CaeConfig, PaperCnnConfig, assemble_and_finetune, build_paper_cnn, cae_pretrain, train_cnn
from .config import ConfigError, Field, dump, fields_from_dataclass, load_json, resolve, section
from .data import CLASS_NAMES, AugmentSpec, DatasetManifest, apply_split, iter_augment_to_counts, write_corpus
from .features import read_feature_file
from .localize import LocalizeConfig, render_overlay, sliding_window_map, threshold_regions, top_region
from .metrics import confusion, metrics, report_table
from .nn import TrainConfig
from .ppm import read_image, write_image
from .synth import synth_dataset, write_synth
from .transfer import (EnsembleSpec, HeadConfig, ensemble_predict, normalize, select_top_k,
                       train_softmax_head, train_svm_head)

log = logging.getLogger("cardamage")

NUM_CLASSES = len(CLASS_NAMES)


class RunError(RuntimeError):
    """Failure while executing a well-formed command."""


# ---------------------------------------------------------------------------
# Schemas
# ---------------------------------------------------------------------------

def _common(out_required: bool = True) -> list[Field]:
    return [
        Field("out", "str", None, "output directory", required=out_required),
        Field("seed", "int", 0, "base seed; section seeds inherit it unless set"),
        Field("threads", "int", 0, "cap on BLAS/OpenMP worker threads (0 = no cap)"),
    ]


def _model_fields() -> list[Field]:
    return [Field("model.input_size", "int", 224, "square network input size")] + fields_from_dataclass(
        "model", PaperCnnConfig, exclude=("input_shape", "num_classes"))


def _data_fields(split: str) -> list[Field]:
    return [
        Field("data", "str", None, "dataset directory with manifest.tsv", required=True),
        Field("data.split", "str", split, "manifest split to use (train, test, none or all)"),
    ]


SCHEMAS: dict[str, list[Field]] = {
    "synth": _common() + [
        Field("n", "int", 50, "images per class"),
        Field("size", "int", 64, "image side in pixels"),
    ],
    "augment": _common() + [
        Field("in", "str", None, "dataset directory", required=True),
        Field("counts", "str", None, "JSON file with per-class target counts (list or name->count)",
              required=True),
        Field("split", "str", "all", "manifest split to augment (train, test, none or all)"),
        Field("augment.rotation_min", "float", -20.0, "smallest rotation in degrees"),
        Field("augment.rotation_max", "float", 20.0, "largest rotation in degrees"),
        Field("augment.flip_prob", "float", 0.5, "probability of a horizontal flip"),
        Field("augment.seed", "int", 0, "augmentation seed"),
    ],
    "split": _common() + [
        Field("in", "str", None, "dataset directory", required=True),
        Field("split.train_frac", "float", 0.8, "per-class training fraction"),
        Field("split.seed", "int", 0, "split seed"),
    ],
    "train-cnn": _common() + _data_fields("train") + _model_fields() + fields_from_dataclass(
        "train", TrainConfig),
    "pretrain-cae": _common() + _data_fields("train") + _model_fields() + fields_from_dataclass(
        "cae", CaeConfig),
    "finetune": _common() + _data_fields("train") + [
        Field("stages", "str", None, "directory holding stage_<i>.dnet files", required=True),
    ] + _model_fields() + fields_from_dataclass("cae", CaeConfig) + fields_from_dataclass("train", TrainConfig),
    "train-head": _common() + [
        Field("features", "str", None, "training feature file (.feat or .csv)", required=True),
        Field("test_features", "str", None, "optional feature file to score"),
        Field("head.kind", "str", "softmax", "softmax or svm"),
    ] + fields_from_dataclass("head", HeadConfig),
    "ensemble": _common() + [
        Field("probs", "strs", None, "comma-separated member probability TSV files", required=True),
        Field("labels", "str", None, "TSV (id, class) used for weighting and selection"),
        Field("ensemble.weights", "str", "uniform", "uniform, proportional, or comma-separated weights"),
        Field("ensemble.top_k", "int", 0, "keep the k most accurate members (0 = all)"),
    ],
    "eval": _common(out_required=False) + [
        Field("preds", "str", None, "TSV (id, class) predictions"),
        Field("labels", "str", None, "TSV (id, class) ground truth"),
        Field("model", "str", None, "network checkpoint to evaluate on --data"),
        Field("data", "str", None, "dataset directory for --model"),
        Field("data.split", "str", "test", "manifest split to evaluate (train, test, none or all)"),
        Field("eval.empty", "float", 0.0, "score for classes with an empty row or column"),
        Field("eval.decimals", "int", 2, "rounding of reported percentages"),
    ],
    "localize": _common() + [
        Field("model", "str", None, "network checkpoint", required=True),
        Field("image", "str", None, "PPM/PGM image to scan", required=True),
    ] + fields_from_dataclass("localize", LocalizeConfig, overrides={
        "resize_to": Field("", "int", 0, "crop resize side (0 = model input size)"),
    }),
}

META_FLAGS = ("config",)


def schema_keys(command: str) -> set[str]:
    return {f.key for f in SCHEMAS[command]}


# ---------------------------------------------------------------------------
# Small file formats
# ---------------------------------------------------------------------------

def _class_index(value: str, where: str) -> int:
    v = value.strip()
    if v in CLASS_NAMES:
        return CLASS_NAMES.index(v)
    try:
        k = int(v)
    except ValueError:
        raise RunError(f"{where}: unknown class {v!r}") from None
    if not 0 <= k < NUM_CLASSES:
        raise RunError(f"{where}: class index {k} outside [0, {NUM_CLASSES})")
    return k


def read_labels_tsv(path) -> dict[str, int]:
    """TSV ``id<TAB>class`` (name or index); a leading ``id`` header row is skipped."""
    out: dict[str, int] = {}
    with open(path, newline="") as f:
        for n, row in enumerate(csv.reader(f, delimiter="\t"), 1):
            if not row or (n == 1 and row[0] == "id"):
                continue
            if len(row) < 2:
                raise RunError(f"{path}:{n}: expected id and value")
            if row[0] in out:
                raise RunError(f"{path}:{n}: duplicate id {row[0]!r}")
            out[row[0]] = _class_index(row[1], f"{path}:{n}")
    return out


def write_labels_tsv(path, ids, labels) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        for i, k in zip(ids, labels):
            w.writerow([i, CLASS_NAMES[int(k)]])


def write_probs_tsv(path, ids, probs) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["id", *CLASS_NAMES[: probs.shape[1]]])
        for i, row in zip(ids, probs):
            w.writerow([i, *(repr(float(v)) for v in row)])


def read_probs_tsv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f, delimiter="\t"))
    if not rows or rows[0][:1] != ["id"]:
        raise RunError(f"{path}: probability file needs an 'id' header")
    body = rows[1:]
    if not body:
        raise RunError(f"{path}: no rows")
    try:
        probs = np.array([[float(v) for v in r[1:]] for r in body])
    except ValueError as e:
        raise RunError(f"{path}: {e}") from None
    return [r[0] for r in body], probs


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _build(cls, *args, **kwargs):
    """Construct a config object, reporting rejected values as config errors."""
    try:
        return cls(*args, **kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{cls.__name__}: {e}") from None


def _split_arg(value: str):
    return None if value == "all" else value


def _input_shape(cfg) -> tuple:
    s = cfg["model.input_size"]
    return (s, s, 3)


def _cnn_config(cfg) -> PaperCnnConfig:
    m = section(cfg, "model")
    m.pop("input_size")
    return _build(PaperCnnConfig, input_shape=_input_shape(cfg), num_classes=NUM_CLASSES, **m)


def _load_split(cfg, size: int):
    manifest = DatasetManifest.read(cfg["data"])
    split = cfg["data.split"]
    x, y, ids = manifest.load(_split_arg(split), channels=3, size=size)
    if len(x) == 0:
        raise RunError(f"no images in split {split!r} of {cfg['data']}")
    return x, y, ids


def _json_out(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_synth(cfg, out: Path):
    items = synth_dataset(cfg["n"], cfg["size"], cfg["seed"])
    manifest = write_synth(items, out)
    print(f"wrote {len(manifest.entries)} images to {out}")


def _target_counts(path):
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read counts {path}: {e}") from None
    if isinstance(data, dict) and "counts" in data:
        data = data["counts"]
    if isinstance(data, dict):
        unknown = sorted(set(data) - set(CLASS_NAMES))
        if unknown:
            raise ConfigError(f"counts: unknown class {unknown[0]!r}")
        return tuple(int(data.get(name, 0)) for name in CLASS_NAMES)
    if not isinstance(data, list) or len(data) != NUM_CLASSES:
        raise ConfigError(f"counts must list {NUM_CLASSES} values or map class names to counts")
    return tuple(int(v) for v in data)


def cmd_augment(cfg, out: Path):
    spec = _build(AugmentSpec, (cfg["augment.rotation_min"], cfg["augment.rotation_max"]),
                       cfg["augment.flip_prob"], _target_counts(cfg["counts"]), cfg["augment.seed"])
    manifest = DatasetManifest.read(cfg["in"])
    split = _split_arg(cfg["split"])
    images = manifest.images(split)
    corpus = write_corpus(iter_augment_to_counts(images, spec), out, split or "none")
    counts = corpus.counts()
    _json_out(out / "counts.json", dict(zip(CLASS_NAMES, counts)))
    print("counts " + " ".join(str(c) for c in counts))


def cmd_split(cfg, out: Path):
    src = Path(cfg["in"])
    if not 0.0 < cfg["split.train_frac"] < 1.0:
        raise ConfigError(f"split.train_frac must be in (0, 1), got {cfg['split.train_frac']}")
    manifest = apply_split(DatasetManifest.read(src), cfg["split.train_frac"], cfg["split.seed"])
    if out.resolve() != src.resolve():
        for e in manifest.entries:
            dst = out / CLASS_NAMES[e.label] / f"{e.id}.ppm"
            dst.parent.mkdir(parents=True, exist_ok=True)
            dst.write_bytes(manifest.path(e).read_bytes())
    manifest.write(out)
    print(f"train {sum(manifest.counts('train'))} test {sum(manifest.counts('test'))}")


def cmd_train_cnn(cfg, out: Path):
    model, train = _cnn_config(cfg), _build(TrainConfig, **section(cfg, "train"))
    x, y, _ = _load_split(cfg, cfg["model.input_size"])
    net = build_paper_cnn(model, seed=cfg["train.seed"])
    net, history = train_cnn(net, x, y, train)
    checkpoint.save_network(net, out / "model.dnet")
    _json_out(out / "history.json", history)
    if history:
        print(f"final loss {history[-1]['loss']:.4f} accuracy {100 * history[-1]['accuracy']:.2f}")


def cmd_pretrain_cae(cfg, out: Path):
    model, cae = _cnn_config(cfg), _build(CaeConfig, **section(cfg, "cae"))
    x, _, _ = _load_split(cfg, cfg["model.input_size"])
    stages = cae_pretrain(x, cae, model.filters, model.kernel)
    summary = []
    for st in stages:
        checkpoint.save_stage(st, _input_shape(cfg), out / f"stage_{st.index}.dnet")
        summary.append({"stage": st.index, "mse_init": st.mse_init, "mse_final": st.mse_final})
        print(f"stage {st.index} mse {st.mse_init:.6f} -> {st.mse_final:.6f}")
    _json_out(out / "cae.json", summary)


def cmd_finetune(cfg, out: Path):
    cae = _build(CaeConfig, **section(cfg, "cae"))
    model, train = _cnn_config(cfg), _build(TrainConfig, **section(cfg, "train"))
    stages = []
    for i in range(cae.stages):
        path = Path(cfg["stages"]) / f"stage_{i}.dnet"
        if not path.exists():
            raise RunError(f"missing stage checkpoint {path}")
        stages.append(checkpoint.load_stage(path)[0])
    x, y, _ = _load_split(cfg, cfg["model.input_size"])
    net, history = assemble_and_finetune(stages, x, y, cae, model, train)
    checkpoint.save_network(net, out / "model.dnet")
    _json_out(out / "history.json", history)


def cmd_train_head(cfg, out: Path):
    kind = cfg["head.kind"]
    if kind not in ("softmax", "svm"):
        raise ConfigError(f"head.kind must be softmax or svm, got {kind!r}")
    hc = section(cfg, "head")
    hc.pop("kind")
    head_config = _build(HeadConfig, **hc)
    train = read_feature_file(cfg["features"])
    fit = train_softmax_head if kind == "softmax" else train_svm_head
    head = fit(train, head_config)
    head.save(out / "head.json")
    print(f"train accuracy {100 * head.accuracy(train):.2f}")
    if cfg["test_features"]:
        test = read_feature_file(cfg["test_features"])
        ids = [str(i) for i in range(len(test))]
        write_probs_tsv(out / "probs.tsv", ids, head.predict_proba(test.features))
        write_labels_tsv(out / "preds.tsv", ids, head.predict(test.features))
        write_labels_tsv(out / "labels.tsv", ids, test.labels)
        print(f"test accuracy {100 * head.accuracy(test):.2f}")


def _parse_weights(value: str, m: int, accuracies):
    if value == "uniform":
        return _build(EnsembleSpec.uniform, m).weights
    if value == "proportional":
        if accuracies is None:
            raise ConfigError("proportional weights need --labels")
        return _build(EnsembleSpec.proportional, accuracies).weights
    try:
        raw = [float(v) for v in value.split(",")]
    except ValueError:
        raise ConfigError(f"ensemble.weights: cannot parse {value!r}") from None
    if len(raw) != m:
        raise ConfigError(f"ensemble.weights has {len(raw)} values for {m} members")
    if any(v < 0 for v in raw):
        raise ConfigError("ensemble.weights must be non-negative")
    return _build(normalize, raw)


def cmd_ensemble(cfg, out: Path):
    members = [read_probs_tsv(p) for p in cfg["probs"]]
    ids = members[0][0]
    for path, (mids, _) in zip(cfg["probs"], members):
        if mids != ids:
            raise RunError(f"{path}: ids differ from {cfg['probs'][0]}")
    probs = [p for _, p in members]
    accuracies = None
    if cfg["labels"]:
        truth = read_labels_tsv(cfg["labels"])
        missing = [i for i in ids if i not in truth]
        if missing:
            raise RunError(f"no label for id {missing[0]!r}")
        y = np.array([truth[i] for i in ids])
        accuracies = [float(np.mean(p.argmax(axis=1) == y)) for p in probs]
    k = cfg["ensemble.top_k"]
    if not 0 <= k <= len(probs):
        raise ConfigError(f"ensemble.top_k {k} outside [0, {len(probs)}]")
    chosen = list(range(len(probs)))
    if k:
        if accuracies is None:
            raise ConfigError("ensemble.top_k needs --labels")
        chosen = sorted(select_top_k(accuracies, k))
    sub_acc = [accuracies[i] for i in chosen] if accuracies is not None else None
    weights = _parse_weights(cfg["ensemble.weights"], len(chosen), sub_acc)
    spec = _build(EnsembleSpec, weights, k or "all")
    combined = ensemble_predict(spec, [probs[i] for i in chosen])
    write_probs_tsv(out / "probs.tsv", ids, combined)
    write_labels_tsv(out / "preds.tsv", ids, combined.argmax(axis=1))
    _json_out(out / "ensemble.json", {
        "members": [cfg["probs"][i] for i in chosen],
        "weights": list(spec.weights),
        "member_accuracy": accuracies,
    })


def cmd_eval(cfg, out: Path | None):
    if cfg["model"]:
        if cfg["preds"] or cfg["labels"]:
            raise ConfigError("give either --model/--data or --preds/--labels, not both")
        if not cfg["data"]:
            raise ConfigError("--model needs --data")
        net = checkpoint.load_network(cfg["model"])
        size = net.input_shape[0]
        manifest = DatasetManifest.read(cfg["data"])
        x, y, ids = manifest.load(_split_arg(cfg["data.split"]), channels=net.input_shape[2], size=size)
        if len(x) == 0:
            raise RunError(f"no images in split {cfg['data.split']!r}")
        probs = net.predict_proba(x)
        preds = probs.argmax(axis=1)
        if out is not None:
            write_probs_tsv(out / "probs.tsv", ids, probs)
            write_labels_tsv(out / "preds.tsv", ids, preds)
            write_labels_tsv(out / "labels.tsv", ids, y)
    else:
        if not (cfg["preds"] and cfg["labels"]):
            raise ConfigError("eval needs --preds and --labels, or --model and --data")
        pred_map = read_labels_tsv(cfg["preds"])
        truth = read_labels_tsv(cfg["labels"])
        missing = sorted(set(truth) - set(pred_map))
        if missing:
            raise RunError(f"no prediction for id {missing[0]!r}")
        ids = list(truth)
        preds = np.array([pred_map[i] for i in ids])
        y = np.array([truth[i] for i in ids])
        if not ids:
            raise RunError("no labeled ids")
    m = metrics(confusion(preds, y, NUM_CLASSES), cfg["eval.empty"], cfg["eval.decimals"])
    print(f"accuracy {m.accuracy:.2f} precision {m.precision:.2f} recall {m.recall:.2f}")
    if out is not None:
        (out / "metrics.json").write_text(m.to_json())
        (out / "report.txt").write_text(report_table({"model": m}))


def cmd_localize(cfg, out: Path):
    net = checkpoint.load_network(cfg["model"])
    lc = section(cfg, "localize")
    if lc["resize_to"] == 0:
        lc["resize_to"] = net.input_shape[0]
    if lc["resize_to"] != net.input_shape[0]:
        raise ConfigError(f"localize.resize_to {lc['resize_to']} differs from model input {net.input_shape[0]}")
    config = _build(LocalizeConfig, **lc)
    image = read_image(cfg["image"], channels=net.input_shape[2])
    heat = sliding_window_map(image, net, config)
    regions = threshold_regions(heat, config)
    best = top_region(regions)
    (out / "heatmap.json").write_text(heat.to_json())
    _json_out(out / "regions.json", {
        "regions": [r.to_dict() for r in regions],
        "top": best.to_dict() if best else None,
    })
    write_image(out / "overlay.ppm", render_overlay(image, regions))
    print(f"{len(regions)} regions" + (f"; top {CLASS_NAMES[best.label]} at {best.bbox}" if best else ""))


COMMANDS = {
    "synth": cmd_synth,
    "augment": cmd_augment,
    "split": cmd_split,
    "train-cnn": cmd_train_cnn,
    "pretrain-cae": cmd_pretrain_cae,
    "finetune": cmd_finetune,
    "train-head": cmd_train_head,
    "ensemble": cmd_ensemble,
    "eval": cmd_eval,
    "localize": cmd_localize,
}

HELP = {
    "synth": "write a synthetic labeled corpus",
    "augment": "augment a corpus to per-class target counts",
    "split": "stratified train/test split of a corpus",
    "train-cnn": "train the CNN from random initialization",
    "pretrain-cae": "layerwise convolutional autoencoder pretraining",
    "finetune": "assemble pretrained stages and fine-tune the classifier",
    "train-head": "train a softmax or SVM head on feature vectors",
    "ensemble": "weighted average of member probabilities",
    "eval": "accuracy and macro precision/recall",
    "localize": "sliding-window damage heatmap, regions and overlay",
}


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------

def _describe(f: Field) -> str:
    parts = [f.help] if f.help else []
    parts.append(f"({f.kind}, required)" if f.required else f"({f.kind}, default {f.default!r})")
    return " ".join(parts).replace("%", "%%")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cardamage", description="Car damage classification pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", metavar="FILE", help="JSON file of keys (flags win)")
        for f in schema:
            p.add_argument(f"--{f.key}", dest=f.key, metavar="VALUE", default=argparse.SUPPRESS,
                           help=_describe(f))
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_values = load_json(args.config) if args.config else {}
        cfg = resolve(SCHEMAS[args.command], file_values, flags)
        if cfg["threads"] < 0:
            raise ConfigError("threads must be >= 0")
    except ConfigError as e:
        print(f"cardamage {args.command}: invalid config: {e}", file=sys.stderr)
        return 2
    log.info("resolved config for %s:\n%s", args.command, dump(cfg))
    out = Path(cfg["out"]) if cfg["out"] else None
    try:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "resolved_config.json").write_text(dump({"command": args.command, **cfg}))
        with threadpool_limits(limits=cfg["threads"] or None):
            COMMANDS[args.command](cfg, out)
    except ConfigError as e:
        print(f"cardamage {args.command}: invalid config: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, ArithmeticError) as e:
        print(f"cardamage {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    sys.exit(run())


if __name__ == "__main__":
    main()
