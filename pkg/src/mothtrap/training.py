"""Minibatch SGD training, classification metrics and finite-difference gradient checks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import graph as G
from .data import CLASSES, DatasetSplit, LabeledTile, to_arrays
from .optimize import PruneSchedule, prune_magnitude, prune_masks


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, detail: str = "loss is not finite"):
        super().__init__(f"training diverged at epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_acc: float
    val_acc: float
    loss: float


def predict_proba(model: G.ModelGraph, x: np.ndarray, batch: int = 256) -> np.ndarray:
    out = [G.run(model, x[i:i + batch]).output for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros((0, model.num_classes), np.float32)


def accuracy(model: G.ModelGraph, tiles: list[LabeledTile]) -> float:
    x, y = to_arrays(tiles)
    return float(np.mean(predict_proba(model, x).argmax(axis=1) == y))


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    p = probs[np.arange(len(targets)), targets].astype(np.float64)
    return float(-np.mean(np.log(np.maximum(p, 1e-12))))


def _one_hot(y, k, dtype):
    out = np.zeros((len(y), k), dtype=dtype)
    out[np.arange(len(y)), y] = 1
    return out


def train_sgd(model: G.ModelGraph, data: DatasetSplit, epochs: int = 100, early_stop_acc: float | None = 0.995,
              lr: float = 0.01, batch: int = 32, momentum: float = 0.9, seed: int = 0,
              prune_schedule: PruneSchedule | None = None, bn_momentum: float = 0.1,
              log=None) -> tuple[G.ModelGraph, list[EpochRecord]]:
    """Train a copy of ``model`` on ``data.train`` with cross-entropy loss.

    The test split doubles as the validation set.  Training stops after the
    first epoch whose validation accuracy reaches ``early_stop_acc`` (pass
    None to always run all epochs).  With a fixed ``seed`` the result is
    bit-reproducible.  ``log`` is an optional callable receiving each
    :class:`EpochRecord`.
    """
    if not data.train or not data.test:
        raise ValueError("training needs non-empty train and test splits")
    if model.input_shape[1:] != data.train[0].image.shape:
        raise ValueError(f"model input {model.input_shape} does not match tiles {data.train[0].image.shape}")
    model = model.copy()
    rng = np.random.default_rng(seed)
    x, y = to_arrays(data.train)
    velocity = {k: [np.zeros_like(w) for w in ws] for k, ws in model.weights.items()}
    trainable = {l.name for l in model.layers if l.trainable}
    masks: dict[str, np.ndarray] | None = None
    history: list[EpochRecord] = []

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(x))
        correct, loss_sum = 0, 0.0
        for start in range(0, len(x), batch):
            idx = order[start:start + batch]
            xb, yb = x[idx], y[idx]
            try:
                tr = G.run(model, xb, training=True, rng=rng, record=True)
            except FloatingPointError as exc:
                raise TrainingDivergedError(epoch, str(exc)) from None
            probs = tr.output
            loss = cross_entropy(probs, yb)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch)
            loss_sum += loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == yb))
            dlogits = (probs - _one_hot(yb, model.num_classes, probs.dtype)) / len(idx)
            try:
                grads = G.backward(model, tr, dlogits, from_logits=True)
            except FloatingPointError as exc:
                raise TrainingDivergedError(epoch, str(exc)) from None
            for name, ws in model.weights.items():
                if name not in trainable:
                    continue
                layer = model.layer(name)
                n_params = 2 if layer.kind == "batchnorm" else len(ws)
                for i in range(n_params):
                    v = velocity[name][i]
                    v *= momentum
                    v -= lr * grads[name][i]
                    ws[i] += v
                if masks is not None and name in masks:
                    ws[0] *= masks[name]
            for name, (bmean, bvar) in tr.bn_stats.items():
                ws = model.weights[name]
                ws[2] += bn_momentum * (bmean.astype(ws[2].dtype) - ws[2])
                ws[3] += bn_momentum * (bvar.astype(ws[3].dtype) - ws[3])
        if prune_schedule is not None:
            target = prune_schedule.sparsity_at(epoch)
            if target:
                model, _ = prune_magnitude(model, target)
                masks = prune_masks(model)
        try:
            val_acc = accuracy(model, data.test)
        except FloatingPointError as exc:
            raise TrainingDivergedError(epoch, str(exc)) from None
        rec = EpochRecord(epoch, correct / len(x), val_acc, loss_sum / len(x))
        history.append(rec)
        if log is not None:
            log(rec)
        if early_stop_acc is not None and val_acc >= early_stop_acc:
            break
    return model, history


def write_history(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_acc", "val_acc", "loss"])
        for r in history:
            w.writerow([r.epoch, f"{r.train_acc:.6f}", f"{r.val_acc:.6f}", f"{r.loss:.6f}"])


# ---------------------------------------------------------------------------
# metrics


def f_measure(precision: float, recall: float) -> float:
    if precision + recall == 0 or math.isnan(precision) or math.isnan(recall):
        return math.nan
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class Metrics:
    """Confusion counts and derived rates (percent); positive class is codling moth.

    A rate whose denominator is zero is NaN and listed in ``undefined``.
    """

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return 100.0 * (self.tp + self.tn) / self.total if self.total else math.nan

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return 100.0 * self.tp / d if d else math.nan

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return 100.0 * self.tp / d if d else math.nan

    @property
    def f_score(self) -> float:
        return f_measure(self.precision, self.recall)

    @property
    def undefined(self) -> tuple[str, ...]:
        names = ("accuracy", "recall", "precision", "f_score")
        return tuple(n for n in names if math.isnan(getattr(self, n)))

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "recall": self.recall, "precision": self.precision,
                "f_score": self.f_score, "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}

    def __str__(self):
        def fmt(v):
            return "undefined" if math.isnan(v) else f"{v:.1f}"

        return (f"accuracy={fmt(self.accuracy)} recall={fmt(self.recall)} precision={fmt(self.precision)} "
                f"f_score={fmt(self.f_score)} TP={self.tp} FP={self.fp} FN={self.fn} TN={self.tn}")


def evaluate_metrics(model: G.ModelGraph, test: list[LabeledTile], threshold: float = 0.5) -> Metrics:
    """Call a tile codling moth when its moth probability is >= ``threshold``."""
    if not test:
        raise ValueError("evaluate_metrics needs a non-empty test set")
    x, y = to_arrays(test)
    p_moth = predict_proba(model, x)[:, CLASSES.index("codling_moth")]
    pred = p_moth >= threshold
    actual = y == CLASSES.index("codling_moth")
    return Metrics(tp=int(np.sum(pred & actual)), fp=int(np.sum(pred & ~actual)),
                   fn=int(np.sum(~pred & actual)), tn=int(np.sum(~pred & ~actual)))


# ---------------------------------------------------------------------------
# gradient check


def _as_float64(model: G.ModelGraph) -> G.ModelGraph:
    m = model.copy()
    m.weights = {k: [w.astype(np.float64) for w in ws] for k, ws in m.weights.items()}
    return m


def _loss(model, x, y) -> float:
    return cross_entropy(G.run(model, x).output, y)


def loss_gradients(model: G.ModelGraph, x: np.ndarray, y: np.ndarray) -> dict[str, list[np.ndarray]]:
    """Analytic cross-entropy gradients (inference-mode forward) for a batch."""
    tr = G.run(model, x, record=True)
    d = (tr.output - _one_hot(y, model.num_classes, tr.output.dtype)) / len(y)
    return G.backward(model, tr, d, from_logits=True)


def grad_check(model: G.ModelGraph, sample: LabeledTile, h: float = 1e-5, n_params: int = 200,
               seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference loss gradients.

    Runs in float64 on a random subset of ``n_params`` trainable scalars
    (batchnorm running statistics and masked-out connections are excluded).
    Relative error is ``|a - n| / max(|a|, |n|)``, taken as 0 when both are 0.
    The step is small because a bias shifts a whole feature map: with steps
    around 1e-3 some ReLU inputs cross zero and the difference quotient, not
    the analytic gradient, goes wrong.
    """
    m = _as_float64(model)
    x = sample.image[None, None].astype(np.float64)
    y = np.array([sample.target])
    analytic = loss_gradients(m, x, y)

    candidates = []
    for layer in m.layers:
        if layer.name not in m.weights or not layer.trainable:
            continue
        ws = m.weights[layer.name]
        count = 2 if layer.kind == "batchnorm" else len(ws)
        for ti in range(count):
            allowed = np.ones(ws[ti].size, dtype=bool)
            if ti == 0 and layer.params.get("mask") is not None:
                allowed = np.broadcast_to(np.asarray(layer.params["mask"])[:, :, None, None], ws[0].shape).ravel()
            candidates.extend((layer.name, ti, int(j)) for j in np.flatnonzero(allowed))
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=min(n_params, len(candidates)), replace=False)

    worst = 0.0
    for k in picks:
        name, ti, j = candidates[k]
        w = m.weights[name][ti].reshape(-1)
        orig = w[j]
        w[j] = orig + h
        lp = _loss(m, x, y)
        w[j] = orig - h
        lm = _loss(m, x, y)
        w[j] = orig
        num = (lp - lm) / (2 * h)
        ana = float(analytic[name][ti].reshape(-1)[j])
        denom = max(abs(num), abs(ana))
        err = 0.0 if denom == 0 else abs(num - ana) / denom
        worst = max(worst, err)
    return worst
