"""Fine-tuning loop and evaluation metrics."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .errors import DataError, DegenerateInputError, NumericError
from .network import ModelGraph, frozen_prefix

log = logging.getLogger(__name__)


@dataclass
class HyperParams:
    learning_rate: float = 1e-4
    epochs: int = 40
    batch_size: int = 16
    seed: int = 0
    freeze_blocks: Optional[int] = None
    optimizer: str = "adam"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError(f"invalid hyperparameters: {self}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    val_auc: float


@dataclass
class History:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "val_auc"])
            for r in self.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in
                                        ("train_loss", "train_acc", "val_loss", "val_acc", "val_auc")])
        return path


# --------------------------------------------------------------------------
# metrics


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + P(tie)/2.

    Computed from doubled mid-ranks so the count stays an exact integer.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("AUC undefined: need at least one positive and one negative")
    doubled_ranks = np.rint(2 * rankdata(scores, method="average")).astype(np.int64)
    u2 = int(doubled_ranks[labels].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def macro_auc(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean one-vs-rest AUC over classes that have both positives and negatives."""
    aucs = [roc_auc(probs[:, k], labels == k) for k in range(probs.shape[1])
            if 0 < np.sum(labels == k) < labels.size]
    return float(np.mean(aucs)) if aucs else float("nan")


@dataclass
class EvalReport:
    confusion_matrix: List[List[int]]
    per_class_acc: List[Optional[float]]
    mean_acc: float
    overall_acc: float
    macro_auc: float
    class_names: List[str] = field(default_factory=list)

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def evaluation_report(probs: np.ndarray, labels: np.ndarray, class_names: Sequence[str] = ()) -> EvalReport:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("evaluation needs a non-empty set")
    k = probs.shape[1]
    pred = probs.argmax(axis=1)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    rows = cm.sum(axis=1)
    per_class = [float(cm[i, i] / rows[i]) if rows[i] else None for i in range(k)]
    present = [a for a in per_class if a is not None]
    return EvalReport(
        confusion_matrix=cm.tolist(),
        per_class_acc=per_class,
        mean_acc=float(np.mean(present)),
        overall_acc=float(np.trace(cm) / cm.sum()),
        macro_auc=macro_auc(probs, labels),
        class_names=list(class_names),
    )


def predict_proba(model: ModelGraph, X: np.ndarray, batch_size: int = 64, start: int = 0) -> np.ndarray:
    out = []
    for i in range(0, len(X), batch_size):
        logits = model.forward(X[i:i + batch_size], start=start).data
        out.append(T.softmax(logits.astype(np.float64)))
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def evaluate(model: ModelGraph, X: np.ndarray, y: np.ndarray, class_names: Sequence[str] = ()) -> EvalReport:
    if len(X) == 0:
        raise DataError("evaluation needs a non-empty test set")
    return evaluation_report(predict_proba(model, X), y, class_names)


# --------------------------------------------------------------------------
# training


def _features(model: ModelGraph, X: np.ndarray, stop: int, batch_size: int = 64) -> np.ndarray:
    if stop == 0:
        return X
    return np.concatenate([model.forward(X[i:i + batch_size], stop=stop).data
                           for i in range(0, len(X), batch_size)])


def train(model: ModelGraph, train_set: Tuple[np.ndarray, np.ndarray],
          val_set: Optional[Tuple[np.ndarray, np.ndarray]], hp: HyperParams,
          on_epoch=None) -> Tuple[ModelGraph, History]:
    """Mini-batch training; the model is left holding its best-validation weights.

    The leading layers that carry no trainable parameter are evaluated once
    up front (their output never changes), so frozen blocks cost one pass.
    """
    X, y = train_set
    if len(X) == 0:
        raise DataError("empty training set")
    history = History()
    if hp.epochs == 0:
        return model, history

    params = model.parameters()
    opt = T.Adam(params, lr=hp.learning_rate) if hp.optimizer == "adam" else T.SGD(params, lr=hp.learning_rate)
    start = frozen_prefix(model)
    F = _features(model, X, start)
    Fv = _features(model, val_set[0], start) if val_set is not None else None
    rng = np.random.default_rng(hp.seed)
    best_key, best_state = None, None

    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(len(F))
        loss_sum, correct = 0.0, 0
        for i in range(0, len(order), hp.batch_size):
            idx = order[i:i + hp.batch_size]
            opt.zero_grad()
            logits = model.forward(F[idx], start=start)
            loss = T.softmax_cross_entropy(logits, y[idx])
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {i // hp.batch_size}")
            loss.backward()
            opt.step()
            loss_sum += float(loss.data) * len(idx)
            correct += int(np.sum(logits.data.argmax(axis=1) == y[idx]))
        rec = EpochRecord(epoch, loss_sum / len(F), correct / len(F), float("nan"), float("nan"), float("nan"))
        if Fv is not None and len(Fv):
            probs = predict_proba(model, Fv, start=start)
            yv = val_set[1]
            rec.val_loss = float(-np.mean(np.log(np.maximum(probs[np.arange(len(yv)), yv], 1e-300))))
            rec.val_acc = float(np.mean(probs.argmax(axis=1) == yv))
            rec.val_auc = macro_auc(probs, yv)
            key = (rec.val_acc, -rec.val_loss)
            if best_key is None or key > best_key:
                best_key, best_state, history.best_epoch = key, model.state(), epoch
        history.records.append(rec)
        model.epoch = epoch
        log.info("epoch %d loss %.4f acc %.3f val_loss %.4f val_acc %.3f val_auc %.3f", epoch,
                 rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc, rec.val_auc)
        if on_epoch is not None:
            on_epoch(rec)

    if best_state is not None:
        model.load_state(best_state)
        model.epoch = history.best_epoch
    return model, history
