"""Training loop: per-epoch grade targets, per-batch partition, hybrid loss, Adam."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import ndkernel as nk
from .confidence import (
    GRADES,
    check_partition,
    grade_average_confidence,
    partition_batch,
    sample_confidence,
)
from .data import AugmentConfig, augment, oversample_minority, stack, standardization
from .errors import ConfigError, NumericError
from .evalstats import confusion_metrics
from .losses import HybridConfig, ce_loss, hybrid_objective
from .model import predict
from .optim import AdamState, adam_step, kaiming_init

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "adam_step",
    "kaiming_init",
    "stratified_batches",
    "train",
]

log = logging.getLogger(__name__)

HISTORY_COLUMNS = (
    "epoch",
    "mode",
    "train_loss",
    "j_lsce",
    "j_kld",
    "j_ce",
    "j_hybrid",
    "n_high",
    "n_medium",
    "n_low",
    "val_loss",
    "val_accuracy",
    "val_f1",
    "c_kl0",
    "c_kl2",
)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    weight_decay: float = 3e-4
    dropout: float = 0.2
    loss_mode: str = "hybrid"  # "hybrid" or "ce"
    hybrid: HybridConfig = field(default_factory=HybridConfig)
    warm_up_epochs: int = 0
    seed: int = 0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    oversample: bool = True
    check_partitions: bool = True

    def validate(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be > 0 and weight_decay >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 so both grades can appear")
        if self.epochs < 0 or self.warm_up_epochs < 0:
            raise ConfigError("epochs and warm_up_epochs must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.loss_mode not in ("hybrid", "ce"):
            raise ConfigError(f"loss_mode must be 'hybrid' or 'ce', got {self.loss_mode!r}")
        self.hybrid.validate()
        return self


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = -1.0

    def write_csv(self, path):
        """history.csv; wall-clock times are kept out so reruns compare byte-equal."""
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for row in self.rows:
                w.writerow([_fmt(row[c]) for c in HISTORY_COLUMNS])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def stratified_batches(labels, batch_size, rng):
    """Shuffle each grade and deal it evenly across ceil(N / batch_size) batches."""
    labels = np.asarray(labels)
    n = labels.size
    n_batches = max(1, -(-n // batch_size))
    per_class = [rng.permutation(np.flatnonzero(labels == k)) for k in range(len(GRADES))]
    chunks = [np.array_split(idx, n_batches) for idx in per_class]
    batches = [np.concatenate([c[b] for c in chunks]) for b in range(n_batches)]
    return [b for b in batches if b.size]


def _evaluate(model, lat, med, labels, ids):
    probs = predict(model, lat, med)
    scores = sample_confidence(probs, [GRADES[k] for k in labels], ids)
    preds = probs.argmax(axis=1)
    report = confusion_metrics(preds, labels)
    c_s = np.clip(probs[np.arange(labels.size), labels], 1e-12, 1.0)
    return probs, scores, report, float(np.mean(-np.log(c_s)))


def _abort(out, epoch, batch, sample_ids):
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "nan_dump.json").write_text(
            json.dumps({"epoch": epoch, "batch": batch, "sample_ids": sample_ids}, indent=2)
        )
    raise NumericError(f"non-finite loss at epoch {epoch}, batch {batch}; sample ids: {sample_ids}")


def train(model, splits, config: TrainConfig, out_dir=None, on_step=None):
    """Train ``model`` in place; returns ``(model, history)`` with the best-validation weights restored.

    If ``out_dir`` is given, ``best.ckpt`` is rewritten whenever validation
    accuracy improves (ties keep the earlier epoch). ``on_step(epoch, batch,
    loss, model)`` is called after every optimizer step.
    """
    config.validate()
    hyb = config.hybrid
    if config.loss_mode == "hybrid" or config.warm_up_epochs < config.epochs:
        present = {r.grade for r in splits.val}
        if config.loss_mode == "hybrid" and present != set(GRADES):
            raise ConfigError("hybrid training needs validation samples of both grades")
    model.config.dropout_rate = config.dropout
    model.input_mean, model.input_std = standardization(splits.train)

    train_set = oversample_minority(splits.train, config.seed) if config.oversample else list(splits.train)
    t_lat, t_med, t_labels, t_ids = stack(train_set)
    v_lat, v_med, v_labels, v_ids = stack(splits.val)
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    history = TrainHistory()
    best_arrays = {k: v.copy() for k, v in model.state_arrays().items()}
    out = Path(out_dir) if out_dir else None

    _, v_scores, _, _ = _evaluate(model, v_lat, v_med, v_labels, v_ids)
    targets = grade_average_confidence(v_scores)

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        mode = "ce" if config.loss_mode == "ce" or epoch <= config.warm_up_epochs else "hybrid"
        sums = dict(loss=0.0, j_lsce=0.0, j_kld=0.0, j_ce=0.0, j_hybrid=0.0, H=0, M=0, L=0)
        batches = stratified_batches(t_labels, config.batch_size, rng)
        for b, idx in enumerate(batches):
            if config.augment is not None:
                pairs = [augment(train_set[i], epoch, config.seed, config.augment) for i in idx]
                x_lat = np.stack([p.lateral for p in pairs])[:, None]
                x_med = np.stack([p.medial for p in pairs])[:, None]
            else:
                x_lat, x_med = t_lat[idx], t_med[idx]
            y = t_labels[idx]
            drop_rng = np.random.default_rng([config.seed, epoch, b, 2])
            model.zero_grad()
            with nk.Tape() as tape:
                probs, _ = model.forward(x_lat, x_med, training=True, rng=drop_rng)
                if not np.all(np.isfinite(probs.data)):
                    _abort(out, epoch, b, [t_ids[i] for i in idx])
                if mode == "ce":
                    loss = ce_loss(probs, y)
                    sums["j_ce"] += float(loss.data)
                    sums["L"] += y.size
                else:
                    ids = [t_ids[i] for i in idx]
                    scores = sample_confidence(probs.data, [GRADES[k] for k in y], ids)
                    part = partition_batch(scores, hyb.partition)
                    if config.check_partitions:
                        check_partition(scores, part, hyb.partition)
                    report = hybrid_objective(probs, y, part, hyb, targets)
                    loss = report.total
                    for key in ("j_lsce", "j_kld", "j_ce", "j_hybrid"):
                        sums[key] += getattr(report, key)
                    for key in ("H", "M", "L"):
                        sums[key] += report.sizes[key]
            value = float(loss.data)
            if not np.isfinite(value):
                _abort(out, epoch, b, [t_ids[i] for i in idx])
            tape.backward(loss)
            grads = {name: p.grad for name, p in model.params.items()}
            adam_step(
                model.params, grads, state, config.learning_rate, weight_decay=config.weight_decay
            )
            sums["loss"] += value
            if on_step is not None:
                on_step(epoch, b, value, model)

        nb = len(batches)
        _, v_scores, v_report, v_loss = _evaluate(model, v_lat, v_med, v_labels, v_ids)
        # targets for the next epoch come from this same pass
        targets = grade_average_confidence(v_scores)
        row = {
            "epoch": epoch,
            "mode": mode,
            "train_loss": sums["loss"] / nb,
            "j_lsce": sums["j_lsce"] / nb,
            "j_kld": sums["j_kld"] / nb,
            "j_ce": sums["j_ce"] / nb,
            "j_hybrid": sums["j_hybrid"] / nb if mode == "hybrid" else sums["loss"] / nb,
            "n_high": sums["H"] / nb,
            "n_medium": sums["M"] / nb,
            "n_low": sums["L"] / nb,
            "val_loss": v_loss,
            "val_accuracy": v_report.accuracy,
            "val_f1": v_report.f1,
            "c_kl0": targets["KL0"],
            "c_kl2": targets["KL2"],
        }
        history.rows.append(row)
        history.wall_times.append(time.perf_counter() - t0)
        log.info(
            "epoch %d %s loss %.4f val_acc %.4f c_k %.3f/%.3f",
            epoch, mode, row["train_loss"], row["val_accuracy"], targets["KL0"], targets["KL2"],
        )
        if v_report.accuracy > history.best_val_accuracy:
            history.best_val_accuracy = v_report.accuracy
            history.best_epoch = epoch
            best_arrays = {k: v.copy() for k, v in model.state_arrays().items()}
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
                checkpoint.save(
                    out / "best.ckpt",
                    model,
                    epoch=epoch,
                    rng_state=rng.bit_generator.state,
                    extra={"train_config": train_config_dict(config)},
                )

    model.load_arrays(best_arrays)
    return model, history


def train_config_dict(config: TrainConfig):
    d = asdict(config)
    d["hybrid"]["partition"] = str(config.hybrid.partition)
    return d
