import csv
import json
import math

import numpy as np
import pytest

from siamgap import checkpoint
from siamgap import ndkernel as nk
from siamgap.data import DatasetSplit, split_dataset, synth_dataset
from siamgap.errors import ConfigError, DimensionError, NumericError
from siamgap.model import ModelConfig, build_model
from siamgap.optim import AdamState
from siamgap.trainer import (
    HISTORY_COLUMNS,
    TrainConfig,
    adam_step,
    kaiming_init,
    stratified_batches,
    train,
)


def params_of(**arrays):
    return {k: nk.Tensor(np.array(v, dtype=float), requires_grad=True) for k, v in arrays.items()}


# -------------------------------------------------------------------- adam

def test_adam_first_step_moves_by_lr():
    p = params_of(w=[1.0, -2.0, 0.5])
    adam_step(p, {"w": np.array([3.0, -0.01, 40.0])}, AdamState(), lr=1e-3)
    np.testing.assert_allclose(p["w"].data, [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3], rtol=0, atol=1e-8)


def test_adam_zero_gradient_leaves_parameters():
    p = params_of(w=[1.0, 2.0])
    state = AdamState()
    for _ in range(5):
        adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    assert np.array_equal(p["w"].data, [1.0, 2.0])
    adam_step(p, {}, state, lr=0.1)
    assert np.array_equal(p["w"].data, [1.0, 2.0])


def reference_adam(theta, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Plain scalar-loop Adam."""
    theta = list(theta)
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        for i in range(len(theta)):
            gi = g[i] + wd * theta[i]
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            theta[i] -= lr * mh / (math.sqrt(vh) + eps)
    return theta


@pytest.mark.parametrize("wd", [0.0, 3e-4])
def test_adam_matches_reference_on_quadratic(wd):
    a = np.array([1.0, 4.0, 0.25])
    target = np.array([0.5, -1.0, 2.0])
    grad = lambda th: [2 * a[i] * (th[i] - target[i]) for i in range(3)]
    p = params_of(w=[3.0, 3.0, -3.0])
    state = AdamState()
    for _ in range(100):
        adam_step(p, {"w": 2 * a * (p["w"].data - target)}, state, lr=0.05, weight_decay=wd)
    ref = reference_adam([3.0, 3.0, -3.0], grad, 100, 0.05, wd=wd)
    np.testing.assert_allclose(p["w"].data, ref, rtol=0, atol=1e-10)


def test_weight_decay_shrinks_with_zero_gradient():
    p = params_of(w=np.linspace(-1, 1, 11))
    state = AdamState()
    norms = []
    for _ in range(10):
        adam_step(p, {"w": np.zeros(11)}, state, lr=1e-2, weight_decay=3e-4)
        norms.append(np.linalg.norm(p["w"].data))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step(params_of(w=[1.0, 2.0]), {"w": np.zeros(3)}, AdamState(), lr=0.1)


def test_kaiming_std():
    rng = np.random.default_rng(0)
    w = kaiming_init((64, 32, 3, 3), 32 * 9, rng)
    assert abs(w.std() / math.sqrt(2 / 288) - 1) < 0.02
    assert abs(w.mean()) < 0.01 * math.sqrt(2 / 288) * 5
    with pytest.raises(ValueError):
        kaiming_init((2, 2), 0, rng)


# ------------------------------------------------------------- batching

@pytest.mark.parametrize("n0,n2,bs", [(70, 70, 32), (50, 13, 16), (9, 9, 4), (5, 1, 32)])
def test_stratified_batches(n0, n2, bs):
    labels = np.array([0] * n0 + [1] * n2)
    batches = stratified_batches(labels, bs, np.random.default_rng(0))
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(n0 + n2))
    assert len(batches) == -(-(n0 + n2) // bs)
    for k, n in ((0, n0), (1, n2)):
        counts = [int((labels[b] == k).sum()) for b in batches]
        assert max(counts) - min(counts) <= 1
        assert sum(counts) == n


# -------------------------------------------------------------- training

@pytest.fixture(scope="module")
def tiny_splits():
    recs = synth_dataset(30, 30, patch_size=16, seed=1)
    return split_dataset(recs, ratio=(6, 2, 2), seed=0)


def tiny_model(seed=0):
    return build_model(ModelConfig.desk(input_size=16, block_channels=(2, 4, 4, 8)), init_seed=seed)


def tiny_config(**kw):
    base = dict(epochs=2, batch_size=8, learning_rate=3e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_history_is_deterministic(tiny_splits, tmp_path):
    _, h1 = train(tiny_model(), tiny_splits, tiny_config(), out_dir=tmp_path / "a")
    _, h2 = train(tiny_model(), tiny_splits, tiny_config(), out_dir=tmp_path / "b")
    assert h1.rows == h2.rows
    h1.write_csv(tmp_path / "a.csv")
    h2.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    with open(tmp_path / "a.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == HISTORY_COLUMNS and len(rows) == 3
    for row in h1.rows:
        assert row["mode"] == "hybrid"
        assert row["n_high"] + row["n_medium"] + row["n_low"] > 0
        assert 0 < row["c_kl0"] < 1 and 0 < row["c_kl2"] < 1


def test_best_weights_are_restored_and_saved(tiny_splits, tmp_path):
    model, hist = train(tiny_model(), tiny_splits, tiny_config(epochs=3), out_dir=tmp_path)
    accs = [r["val_accuracy"] for r in hist.rows]
    assert hist.best_epoch == 1 + accs.index(max(accs))
    loaded, header = checkpoint.load(tmp_path / "best.ckpt")
    assert header["epoch"] == hist.best_epoch
    for name, arr in model.state_arrays().items():
        assert np.array_equal(arr, loaded.state_arrays()[name]), name


def test_warm_up_uses_cross_entropy_first(tiny_splits):
    _, hist = train(tiny_model(), tiny_splits, tiny_config(warm_up_epochs=1))
    assert [r["mode"] for r in hist.rows] == ["ce", "hybrid"]
    assert hist.rows[0]["n_low"] > 0 and hist.rows[0]["n_high"] == 0
    _, ce = train(tiny_model(), tiny_splits, tiny_config(loss_mode="ce", epochs=1))
    assert ce.rows[0]["j_ce"] == ce.rows[0]["train_loss"]


def test_step_callback_sees_every_batch(tiny_splits):
    seen = []
    train(tiny_model(), tiny_splits, tiny_config(epochs=1),
          on_step=lambda e, b, loss, m: seen.append((e, b)))
    n = len(tiny_splits.train)
    assert seen == [(1, b) for b in range(-(-n // 8))]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_dump(tiny_splits, tmp_path):
    def poison(epoch, batch, loss, model):
        model.params["head.bias"].data[:] = np.nan

    with pytest.raises(NumericError, match="sample ids"):
        train(tiny_model(), tiny_splits, tiny_config(), out_dir=tmp_path, on_step=poison)
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["epoch"] == 1 and dump["batch"] == 1 and len(dump["sample_ids"]) == 8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_model_fails_before_training(tiny_splits):
    model = tiny_model()
    model.params["head.bias"].data[:] = np.inf
    with pytest.raises(NumericError):
        train(model, tiny_splits, tiny_config())


def test_hybrid_needs_both_validation_grades(tiny_splits):
    one_grade = DatasetSplit(tiny_splits.train, [r for r in tiny_splits.val if r.grade == "KL0"],
                             tiny_splits.test)
    with pytest.raises(ConfigError):
        train(tiny_model(), one_grade, tiny_config())


@pytest.mark.parametrize("bad", [dict(learning_rate=0), dict(batch_size=1), dict(epochs=-1),
                                 dict(dropout=1.0), dict(loss_mode="focal")])
def test_bad_train_config(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad).validate()
