import math

import numpy as np
import pytest

from mothtrap.data import DatasetSplit, LabeledTile, MOTH, INSECT, synthetic_benchmark
from mothtrap.graph import LayerSpec, ModelGraph, forward
from mothtrap.optimize import PruneSchedule, sparsity
from mothtrap.tensor import ConvSpec
from mothtrap.training import (
    EpochRecord, Metrics, TrainingDivergedError, accuracy, evaluate_metrics, f_measure, grad_check,
    loss_gradients, train_sgd, write_history,
)
from mothtrap.zoo import build_lenet5, init_weights


def tiny(seed=0, trainable_conv=True):
    layers = [
        LayerSpec("conv", "conv", {"spec": ConvSpec(4, 4, 4), "out_channels": 4}, trainable=trainable_conv),
        LayerSpec("relu", "activation", {"fn": "relu"}),
        LayerSpec("flat", "flatten"),
        LayerSpec("fc", "dense", {"units": 2}),
        LayerSpec("softmax", "activation", {"fn": "softmax"}),
    ]
    return ModelGraph(layers, init_weights(layers, (1, 52, 52), seed), (1, 52, 52), 2, "tiny", 0.5)


@pytest.fixture(scope="module")
def small_ds():
    return synthetic_benchmark(200, 100, seed=3)


def test_learning_rate_zero_keeps_weights(small_ds):
    m = tiny()
    out, hist = train_sgd(m, small_ds, epochs=2, lr=0.0, early_stop_acc=None)
    assert len(hist) == 2
    for name, ws in m.weights.items():
        for a, b in zip(ws, out.weights[name]):
            assert a.tobytes() == b.tobytes()


def test_training_is_reproducible(small_ds):
    a, ha = train_sgd(tiny(), small_ds, epochs=2, early_stop_acc=None, seed=4)
    b, hb = train_sgd(tiny(), small_ds, epochs=2, early_stop_acc=None, seed=4)
    assert ha == hb
    assert all(np.array_equal(x, y) for n in a.weights for x, y in zip(a.weights[n], b.weights[n]))


def test_early_stop_at_first_qualifying_epoch(small_ds):
    _, full = train_sgd(tiny(), small_ds, epochs=6, early_stop_acc=None)
    assert [r.epoch for r in full] == list(range(1, 7))
    assert full[-1].train_acc > full[0].train_acc
    target = max(r.val_acc for r in full[:4])
    first = next(r.epoch for r in full if r.val_acc >= target)
    m, hist = train_sgd(tiny(), small_ds, epochs=6, early_stop_acc=target)
    assert len(hist) == first
    assert hist == full[:first]
    assert accuracy(m, small_ds.test) == hist[-1].val_acc


def test_frozen_layer_gets_zero_gradient(small_ds):
    m = tiny(trainable_conv=False)
    x = np.stack([t.image for t in small_ds.train[:4]])[:, None]
    y = np.array([t.target for t in small_ds.train[:4]])
    g = loss_gradients(m, x, y)
    assert all(np.all(w == 0) for w in g["conv"])
    assert np.any(g["fc"][0] != 0)
    out, _ = train_sgd(m, small_ds, epochs=1, early_stop_acc=None)
    assert np.array_equal(out.weights["conv"][0], m.weights["conv"][0])


def test_divergence_names_epoch(small_ds):
    with pytest.raises(TrainingDivergedError, match="epoch 1"):
        with np.errstate(all="ignore"):
            train_sgd(tiny(), small_ds, epochs=3, lr=1e12, early_stop_acc=None)


def test_prune_schedule_applied(small_ds):
    sched = PruneSchedule(0.5, every=1, epochs=2)
    assert [sched.sparsity_at(e) for e in (1, 2)] == [0.25, 0.5]
    m, _ = train_sgd(tiny(), small_ds, epochs=2, early_stop_acc=None, prune_schedule=sched)
    assert sparsity(m) >= 0.5
    assert PruneSchedule(0.5).sparsity_at(5) is None
    assert PruneSchedule(0.5).sparsity_at(100) == 0.5


def test_history_csv(tmp_path):
    p = tmp_path / "h.csv"
    write_history([EpochRecord(1, 0.5, 0.6, 0.7)], p)
    assert p.read_text().splitlines() == ["epoch,train_acc,val_acc,loss", "1,0.500000,0.600000,0.700000"]


def test_mismatched_tiles_rejected():
    ds = DatasetSplit([LabeledTile(np.zeros((40, 40)), MOTH)], [LabeledTile(np.zeros((40, 40)), INSECT)])
    with pytest.raises(ValueError):
        train_sgd(tiny(), ds, epochs=1)


# -- metrics -------------------------------------------------------------------

@pytest.mark.parametrize("p,r,f", [(99.6, 94.9, 97.2), (99.6, 97.4, 98.5), (95.6, 97.2, 96.4)])
def test_table_f_scores(p, r, f):
    assert abs(f_measure(p, r) - f) < 0.05


def test_symmetric_confusion():
    m = Metrics(tp=9, fp=1, fn=1, tn=9)
    assert (m.accuracy, m.recall, m.precision) == (90.0, 90.0, 90.0)
    assert m.f_score == pytest.approx(90.0)
    assert "accuracy=90.0" in str(m)


def test_degenerate_thresholds(small_ds):
    m = tiny()
    everything = evaluate_metrics(m, small_ds.test, threshold=0.0)
    assert everything.recall == 100.0 and everything.fn == 0
    nothing = evaluate_metrics(m, small_ds.test, threshold=1.0 + 1e-9)
    assert nothing.recall == 0.0
    assert "precision" in nothing.undefined and "undefined" in str(nothing)
    assert math.isnan(nothing.f_score)


def test_metrics_consistency(small_ds):
    m = evaluate_metrics(tiny(), small_ds.test)
    assert m.total == len(small_ds.test)
    assert m.accuracy == pytest.approx(100 * (m.tp + m.tn) / m.total)
    if m.precision + m.recall > 0:
        assert abs(m.f_score - 2 * m.precision * m.recall / (m.precision + m.recall)) < 0.1


# -- gradient check ------------------------------------------------------------

def test_grad_check_zero_dense_toy():
    layers = [LayerSpec("flat", "flatten"), LayerSpec("fc", "dense", {"units": 2}),
              LayerSpec("softmax", "activation", {"fn": "softmax"})]
    w = {"fc": [np.zeros((2, 16), np.float32), np.zeros(2, np.float32)]}
    m = ModelGraph(layers, w, (1, 4, 4), 2)
    tile = LabeledTile(np.random.default_rng(0).random((4, 4)), MOTH)
    assert grad_check(m, tile, n_params=34) < 1e-4


def test_grad_check_lenet():
    ds = synthetic_benchmark(4, 0, seed=0)
    assert grad_check(build_lenet5(seed=0), ds.train[0], n_params=200) < 1e-3
