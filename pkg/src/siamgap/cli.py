"""Command-line front end: ``siamgap {synth,train,eval,gradcam,partition-inspect}``.

Exit codes: 0 ok, 1 usage, 2 config, 3 data, 4 numeric.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, checkpoint
from .confidence import (
    GRADES,
    PartitionSpec,
    grade_index,
    partition_batch,
    sample_confidence,
)
from .data import AugmentConfig, read_dataset, split_dataset, stack, synth_dataset, write_dataset
from .errors import ConfigError, DataError, DimensionError, NumericError, SiamGapError, UsageError
from .evalstats import (
    cohens_kappa,
    confidence_curve,
    confusion_metrics,
    discordant_counts,
    mcnemar_chi2,
    mcnemar_exact,
    overconfidence_fraction,
    roc_auc,
    write_confidence_curve_csv,
    write_metrics_json,
    write_roc_csv,
)
from .losses import HybridConfig
from .model import ModelConfig, build_model, gradcam, predict
from .trainer import TrainConfig, stratified_batches, train

log = logging.getLogger("siamgap")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

DEFAULTS = {
    "data": {
        "n_kl0": 200,
        "n_kl2": 200,
        "patch_size": 64,
        "ambiguity": 0.0,
        "label_noise": 0.0,
        "seed": 0,
        "split": [7, 1, 2],
    },
    "model": ModelConfig.desk().to_dict(),
    "train": {
        "learning_rate": 1e-3,
        "batch_size": 32,
        "epochs": 30,
        "weight_decay": 3e-4,
        "dropout": 0.2,
        "loss_mode": "hybrid",
        "warm_up_epochs": 0,
        "seed": 0,
        "augment": True,
        "oversample": True,
        "init_seed": 0,
    },
    "hybrid": {
        "epsilon": 0.15,
        "alpha": 0.4,
        "beta": 0.5,
        "gamma": 0.1,
        "partition": "7:2:1",
        "strict_onehot": False,
    },
}


# ------------------------------------------------------------------ config

def load_run_config(path=None):
    """Defaults merged with a JSON file; unknown sections or keys are rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    for section, values in user.items():
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        unknown = set(values) - set(cfg[section])
        if unknown:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
        cfg[section].update(values)
    return cfg


def _set(cfg, section, key, value):
    if value is not None:
        cfg[section][key] = value


def apply_overrides(cfg, args):
    """Flags win over file values."""
    g = vars(args)
    if g.get("seed") is not None:
        cfg["data"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    for key in ("n_kl0", "n_kl2", "patch_size", "ambiguity", "label_noise"):
        _set(cfg, "data", key, g.get(key))
    if g.get("split"):
        cfg["data"]["split"] = _parse_ints(args.split, ":", "split")
    for key in ("learning_rate", "batch_size", "epochs", "weight_decay", "dropout",
                "warm_up_epochs", "init_seed"):
        _set(cfg, "train", key, g.get(key))
    _set(cfg, "train", "loss_mode", g.get("loss"))
    if g.get("no_augment"):
        cfg["train"]["augment"] = False
    for key in ("epsilon", "alpha", "beta", "gamma"):
        _set(cfg, "hybrid", key, g.get(key))
    _set(cfg, "hybrid", "partition", g.get("lambda_"))
    if g.get("strict_onehot"):
        cfg["hybrid"]["strict_onehot"] = True
    _set(cfg, "model", "dtype", g.get("dtype"))
    _set(cfg, "model", "input_size", g.get("input_size"))
    _set(cfg, "model", "pool_mode", g.get("pool_mode"))
    if g.get("pool_positions"):
        cfg["model"]["pool_positions"] = [p.strip() for p in args.pool_positions.split(",")]
    if g.get("channels"):
        cfg["model"]["block_channels"] = _parse_ints(args.channels, ",", "channels")
    if g.get("full_model"):
        cfg["model"] = ModelConfig().to_dict()
    return cfg


def _parse_ints(text, sep, name):
    try:
        return [int(p) for p in str(text).split(sep)]
    except ValueError as exc:
        raise ConfigError(f"bad --{name} value {text!r}") from exc


def build_configs(cfg):
    """Turn the merged dict into validated ``(ModelConfig, TrainConfig)``."""
    model_cfg = ModelConfig.from_dict(cfg["model"]).validate()
    h = cfg["hybrid"]
    hybrid = HybridConfig(
        epsilon=float(h["epsilon"]),
        alpha=float(h["alpha"]),
        beta=float(h["beta"]),
        gamma=float(h["gamma"]),
        partition=PartitionSpec.parse(h["partition"]),
        strict_onehot=bool(h["strict_onehot"]),
    )
    t = cfg["train"]
    train_cfg = TrainConfig(
        learning_rate=float(t["learning_rate"]),
        batch_size=int(t["batch_size"]),
        epochs=int(t["epochs"]),
        weight_decay=float(t["weight_decay"]),
        dropout=float(t["dropout"]),
        loss_mode=str(t["loss_mode"]),
        hybrid=hybrid,
        warm_up_epochs=int(t["warm_up_epochs"]),
        seed=int(t["seed"]),
        augment=AugmentConfig() if t["augment"] else None,
        oversample=bool(t["oversample"]),
    )
    return model_cfg, train_cfg.validate()


def _echo_config(cfg, out):
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _attach_log(out):
    """Timestamps go to run.log only, so every other output is byte-stable."""
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("siamgap")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def _detach_log(handler):
    logging.getLogger("siamgap").removeHandler(handler)
    handler.close()


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    cfg = apply_overrides(load_run_config(args.config), args)
    d = cfg["data"]
    out = Path(args.out)
    if d["n_kl0"] == 0 or d["n_kl2"] == 0:
        log.warning("dataset holds a single grade; it cannot be used for training")
        print("warning: dataset holds a single grade; it cannot be used for training", file=sys.stderr)
    records = synth_dataset(
        int(d["n_kl0"]), int(d["n_kl2"]), int(d["patch_size"]),
        float(d["ambiguity"]), float(d["label_noise"]), int(d["seed"]),
    )
    write_dataset(records, out)
    _echo_config(cfg, out)
    print(f"wrote {len(records)} samples to {out} (manifest sha256 {_sha256(out / 'manifest.csv')})")
    return EXIT_OK


def _load_split(data_dir, cfg):
    records = read_dataset(data_dir)
    present = {r.grade for r in records}
    if present != set(GRADES):
        raise DataError(f"dataset {data_dir} must hold both grades, found {sorted(present)}")
    return split_dataset(records, tuple(cfg["data"]["split"]), int(cfg["data"]["seed"]))


def _check_patch_size(records, model_cfg):
    size = records[0].lateral.shape[0]
    if size != model_cfg.input_size:
        raise DataError(
            f"dataset patches are {size} px but the model expects {model_cfg.input_size} px"
        )


def evaluate_records(model, records):
    """Eval-mode pass; returns the metrics dict and the artifacts for CSV export."""
    lat, med, labels, ids = stack(records)
    probs = predict(model, lat, med)
    preds = probs.argmax(axis=1)
    report = confusion_metrics(preds, labels)
    report.kappa = cohens_kappa(preds, labels)
    points, report.auc = roc_auc(probs[:, 1], labels)
    scores = sample_confidence(probs, [GRADES[k] for k in labels], ids)
    extra = {
        "overconfidence_fraction": overconfidence_fraction(scores),
        "mean_confidence": float(np.mean([s.confidence for s in scores])),
    }
    return report, extra, points, scores, preds, labels


def _write_eval(out, report, extra, points, scores):
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_json(report, out / "metrics.json", extra)
    write_roc_csv(points, out / "roc.csv")
    write_confidence_curve_csv(confidence_curve(scores), out / "confidence_curve.csv")


def cmd_train(args):
    cfg = apply_overrides(load_run_config(args.config), args)
    model_cfg, train_cfg = build_configs(cfg)
    out = Path(args.out)
    split = _load_split(args.data, cfg)
    _check_patch_size(split.train, model_cfg)
    _echo_config(cfg, out)
    handler = _attach_log(out)
    try:
        model = build_model(model_cfg, init_seed=int(cfg["train"]["init_seed"]))
        t0 = time.perf_counter()
        model, history = train(model, split, train_cfg, out_dir=out)
        log.info("training wall time %.2f s; per-epoch %s", time.perf_counter() - t0,
                 [round(w, 3) for w in history.wall_times])
    finally:
        _detach_log(handler)
    history.write_csv(out / "history.csv")
    digest = checkpoint.save(
        out / "best.ckpt", model, epoch=history.best_epoch,
        extra={"run_config": cfg},
    )
    report, extra, points, scores, _, _ = evaluate_records(model, split.test)
    extra.update({"split": "test", "best_epoch": history.best_epoch,
                  "checkpoint_sha256": digest})
    _write_eval(out, report, extra, points, scores)
    print(
        f"best epoch {history.best_epoch}; test accuracy {report.accuracy:.4f}, "
        f"F1 {report.f1:.4f}, AUC {report.auc:.4f}; outputs in {out}"
    )
    return EXIT_OK


def _load_checkpoint(path):
    model, header = checkpoint.load(path)
    run_cfg = header.get("extra", {}).get("run_config")
    return model, (run_cfg if run_cfg is not None else copy.deepcopy(DEFAULTS))


def _select(split, which):
    if which == "all":
        return split.train + split.val + split.test
    return getattr(split, which)


MCNEMAR = {"exact": mcnemar_exact, "chi2": mcnemar_chi2}


def cmd_eval(args):
    model, run_cfg = _load_checkpoint(args.checkpoint)
    out = Path(args.out)
    records = _select(_load_split(args.data, run_cfg), args.split)
    _check_patch_size(records, model.config)
    if {r.grade for r in records} != set(GRADES):
        raise DataError(f"the {args.split} split must hold both grades")
    report, extra, points, scores, preds, labels = evaluate_records(model, records)
    extra["split"] = args.split
    extra["checkpoint_sha256"] = _sha256(args.checkpoint)
    if args.compare:
        other, _ = _load_checkpoint(args.compare)
        _check_patch_size(records, other.config)
        _, _, _, _, preds_b, _ = evaluate_records(other, records)
        b, c = discordant_counts(preds == labels, preds_b == labels)
        extra["compare"] = {
            "checkpoint_sha256": _sha256(args.compare),
            "kappa_between_models": cohens_kappa(preds, preds_b),
            "mcnemar_test": args.mcnemar,
            "mcnemar_p": MCNEMAR[args.mcnemar](preds == labels, preds_b == labels),
            "discordant_b": b,
            "discordant_c": c,
        }
    _write_eval(out, report, extra, points, scores)
    line = f"{args.split}: accuracy {report.accuracy:.4f}, F1 {report.f1:.4f}, AUC {report.auc:.4f}"
    if args.compare:
        cmp = extra["compare"]
        line += f"; vs other kappa {cmp['kappa_between_models']:.4f}, McNemar p {cmp['mcnemar_p']:.4g}"
    print(line + f"; outputs in {out}")
    return EXIT_OK


def _heat_png(values, path):
    arr = np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG", optimize=False)


def _overlay_png(patch, heat, path):
    """Grey patch with the heatmap blended into the red channel."""
    base = np.clip(patch, 0.0, 1.0)
    rgb = np.stack([base, base, base], axis=-1) * 0.6
    rgb[..., 0] += 0.4 * np.clip(heat, 0.0, 1.0)
    arr = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def cmd_gradcam(args):
    model, _ = _load_checkpoint(args.checkpoint)
    records = {r.sample_id: r for r in read_dataset(args.data)}
    ids = [s.strip() for s in args.ids.split(",") if s.strip()]
    if not ids:
        raise UsageError("--ids needs at least one sample id")
    missing = [s for s in ids if s not in records]
    if missing:
        raise DataError(f"unknown sample ids: {missing}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid in ids:
        rec = records[sid]
        _check_patch_size([rec], model.config)
        target = rec.label if args.target_class is None else grade_index(args.target_class)
        maps = gradcam(model, rec.lateral, rec.medial, target, layer=args.layer)
        for side, heat, patch in (("lateral", maps[0], rec.lateral), ("medial", maps[1], rec.medial)):
            _heat_png(heat.values, out / f"{sid}_{side}_cam.png")
            _overlay_png(patch, heat.values, out / f"{sid}_{side}_overlay.png")
    print(f"wrote Grad-CAM heatmaps for {len(ids)} sample(s) to {out}")
    return EXIT_OK


def cmd_partition_inspect(args):
    model, run_cfg = _load_checkpoint(args.checkpoint)
    spec = PartitionSpec.parse(args.lambda_ or run_cfg["hybrid"]["partition"])
    train_set = _load_split(args.data, run_cfg).train
    _check_patch_size(train_set, model.config)
    lat, med, labels, ids = stack(train_set)
    probs = predict(model, lat, med)
    seed = args.seed if args.seed is not None else int(run_cfg["train"]["seed"])
    batches = stratified_batches(labels, args.batch_size, np.random.default_rng(seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    with open(out / "partition.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "grade", "confidence", "subset"])
        for b, idx in enumerate(batches):
            scores = sample_confidence(
                probs[idx], [GRADES[k] for k in labels[idx]], [ids[i] for i in idx]
            )
            assignment = partition_batch(scores, spec).assignment()
            counts = {g: {k: 0 for k in "HML"} for g in GRADES}
            for s in scores:
                subset = assignment[s.index]
                counts[s.grade][subset] += 1
                w.writerow([s.sample_id, s.grade, repr(s.confidence), subset])
            summary.append({"batch": b, "size": int(len(idx)), "counts": counts})
    (out / "partition_batches.json").write_text(
        json.dumps({"lambda": str(spec), "batches": summary}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    print(f"partitioned {len(ids)} training samples in {len(batches)} batches (lambda {spec}); "
          f"outputs in {out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p, data=True):
    p.add_argument("--config", help="JSON run config (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    if data:
        p.add_argument("--data", required=True, help="dataset directory with manifest.csv")


def build_parser():
    parser = _Parser(prog="siamgap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"siamgap {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic paired-patch dataset")
    _common(p, data=False)
    p.add_argument("--n-kl0", type=int)
    p.add_argument("--n-kl2", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--ambiguity", type=float)
    p.add_argument("--label-noise", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and evaluate it on the test split")
    _common(p)
    p.add_argument("--loss", choices=("ce", "hybrid"))
    p.add_argument("--lambda", dest="lambda_", metavar="H:M:L", help="partition ratio, e.g. 7:2:1")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--strict-onehot", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--warm-up-epochs", type=int)
    p.add_argument("--init-seed", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--split", metavar="TRAIN:VAL:TEST")
    p.add_argument("--dtype", choices=("float64", "float32"))
    p.add_argument("--input-size", type=int, help="model input size; must match the patches")
    p.add_argument("--pool-mode", choices=("gap", "gmp"))
    p.add_argument("--pool-positions", metavar="P1,P2,...")
    p.add_argument("--channels", metavar="C1,C2,C3,C4")
    p.add_argument("--full-model", action="store_true", help="full-size 128 px model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--compare", metavar="CKPT", help="second checkpoint for kappa/McNemar")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--mcnemar", default="exact", choices=tuple(MCNEMAR),
                   help="McNemar variant for --compare (chi2 is continuity-corrected)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcam", help="write Grad-CAM heatmaps for samples")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ids", required=True, help="comma-separated sample ids")
    p.add_argument("--layer", help="conv unit name, e.g. b4.l4 (default: last conv)")
    p.add_argument("--target-class", help="KL0 or KL2 (default: the sample's grade)")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("partition-inspect", help="dump per-batch H/M/L assignment of the train split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lambda", dest="lambda_", metavar="H:M:L")
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_partition_inspect)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError("a command is required: synth, train, eval, gradcam, partition-inspect")
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SiamGapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
