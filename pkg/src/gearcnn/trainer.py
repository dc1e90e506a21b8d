"""Training procedure, evaluation and the cross-validation driver.

Adam with coupled L2 weight decay, a plateau learning-rate schedule on
validation accuracy, early stopping bounded by minimum and maximum epoch
counts, and best-on-validation checkpointing.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import model as M
from .augment import AugmentConfig, augment_batch
from .data import N_CLASSES, Dataset, stratified_kfold, train_val_split
from .exceptions import ConfigurationError, NumericalError, ParseError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr0: float = 0.001
    weight_decay: float = 5e-5
    lr_factor: float = 0.8
    lr_patience: int = 5
    improve_threshold: float = 0.01  # percentage points of validation accuracy
    min_epochs: int = 65
    stop_patience: int = 25
    max_epochs: int = 120
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if not 0 < self.lr_factor < 1:
            raise ConfigurationError(f"lr_factor must lie in (0, 1), got {self.lr_factor}")
        if self.min_epochs > self.max_epochs:
            raise ConfigurationError(
                f"min_epochs ({self.min_epochs}) exceeds max_epochs ({self.max_epochs})"
            )
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be positive")
        if self.lr0 <= 0:
            raise ConfigurationError("lr0 must be positive")

    def capped(self, max_epochs):
        """Same config with training limited to ``max_epochs``."""
        return replace(self, max_epochs=max_epochs, min_epochs=min(self.min_epochs, max_epochs))

    def to_dict(self):
        d = asdict(self)
        aug = d.pop("augment")
        d.update({k: list(v) if isinstance(v, tuple) else v for k, v in aug.items()})
        return d


# --------------------------------------------------------------------------- config file

_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig) if f.name != "augment"}
_AUG_KEYS = {f.name: f.type for f in fields(AugmentConfig)}
_INT_KEYS = {"batch_size", "lr_patience", "min_epochs", "stop_patience", "max_epochs", "seed"}
_TUPLE_KEYS = {"snr_choices_db", "beta_range", "shift_range"}


def parse_config(text):
    """Parse ``key = value`` lines (``#`` comments) into a :class:`TrainConfig`."""
    train, aug = {}, {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", line_no)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TRAIN_KEYS and key not in _AUG_KEYS:
            raise ParseError(f"unknown config key {key!r}", line_no)
        try:
            if key in _TUPLE_KEYS:
                parsed = tuple(float(v) for v in value.replace("[", "").replace("]", "").split(",") if v.strip())
            elif key in _INT_KEYS:
                parsed = int(value)
            else:
                parsed = float(value)
        except ValueError:
            raise ParseError(f"bad value for {key}: {value!r}", line_no) from None
        (aug if key in _AUG_KEYS else train)[key] = parsed
    return TrainConfig(**train, augment=AugmentConfig(**aug))


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(config):
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, list):
            value = ", ".join(repr(float(v)) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- optimizer state


@dataclass
class TrainState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 0.001
    lr_reductions: int = 0
    best_val_acc: float = -math.inf
    best_epoch: int = 0
    epochs_since_best: int = 0
    lr_best: float = -math.inf
    epochs_since_lr_improve: int = 0
    epoch: int = 0

    @classmethod
    def fresh(cls, params, config):
        zeros = {n: np.zeros_like(params[n]) for n in M.trainable_names(params)}
        return cls(m=zeros, v={n: a.copy() for n, a in zeros.items()}, lr=config.lr0)

    def optimizer_state(self):
        return {"m": self.m, "v": self.v, "t": self.t}


def adam_step(params, grads, state, config):
    """In-place Adam update with coupled L2 decay on conv and fc weights."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ConfigurationError(f"gradient shape {g.shape} does not match parameter {name!r}")
    state.t += 1
    bc1 = 1 - b1**state.t
    bc2 = 1 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        if name in M.DECAYED and config.weight_decay:
            g = g + config.weight_decay * p
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
        p -= step.astype(p.dtype, copy=False)
    return params, state


def plateau_lr_update(state, val_acc, config):
    """Cut the rate by ``lr_factor`` after ``lr_patience`` epochs without a
    thresholded improvement over the best accuracy seen by the schedule."""
    if val_acc > state.lr_best + config.improve_threshold:
        state.lr_best = val_acc
        state.epochs_since_lr_improve = 0
    else:
        state.epochs_since_lr_improve += 1
        if state.epochs_since_lr_improve >= config.lr_patience:
            state.lr_reductions += 1
            state.lr = config.lr0 * config.lr_factor**state.lr_reductions
            state.epochs_since_lr_improve = 0
    return state.lr


def record_validation(state, epoch, val_acc):
    """Update the early-stopping tracker. Returns True on strict improvement."""
    state.epoch = epoch
    if val_acc > state.best_val_acc:
        state.best_val_acc = val_acc
        state.best_epoch = epoch
        state.epochs_since_best = 0
        return True
    state.epochs_since_best += 1
    return False


def early_stop_decision(state, config):
    """``"stop"`` or ``"continue"`` after the epoch recorded in ``state``."""
    if state.epoch >= config.max_epochs:
        return "stop"
    if state.epoch >= config.min_epochs and state.epochs_since_best >= config.stop_patience:
        return "stop"
    return "continue"


# --------------------------------------------------------------------------- evaluation


@dataclass
class ConfusionMatrix:
    """``counts[i, j]``: frames of true class ``i`` predicted as ``j``."""

    counts: np.ndarray

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes=N_CLASSES):
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls(counts)

    @property
    def accuracy(self):
        total = self.counts.sum()
        return 100.0 * np.trace(self.counts) / total if total else 0.0

    def row_percentages(self):
        rows = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            pct = np.where(rows > 0, 100.0 * self.counts / np.maximum(rows, 1), 0.0)
        return pct


def evaluate(params, frames, labels, batch_size=256):
    """Eval-phase accuracy (percent) and confusion matrix on raw frames."""
    pred, _ = M.predict(params, frames, batch_size)
    cm = ConfusionMatrix.from_predictions(labels, pred)
    return cm.accuracy, cm


@dataclass
class FoldReport:
    accuracy: float
    confusion: ConfusionMatrix
    epochs_trained: int
    best_epoch: int
    history: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {
            "accuracy": round(self.accuracy, 2),
            "confusion_counts": self.confusion.counts.tolist(),
            "confusion_row_pct": np.round(self.confusion.row_percentages(), 2).tolist(),
            "epochs_trained": self.epochs_trained,
            "best_epoch": self.best_epoch,
        }


@dataclass
class CrossvalReport:
    scenario: str
    folds: list
    config: TrainConfig
    seed: int

    @property
    def fold_accuracies(self):
        return [round(float(f.accuracy), 2) for f in self.folds]

    @property
    def mean_accuracy(self):
        return mean_accuracy(self.fold_accuracies)

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "folds": [f.to_dict() for f in self.folds],
            "mean_accuracy": round(self.mean_accuracy, 2),
            "config_echo": self.config.to_dict(),
            "seed": self.seed,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"


def mean_accuracy(accuracies):
    accuracies = list(accuracies)
    if not accuracies:
        raise ConfigurationError("no fold accuracies to average")
    return sum(accuracies) / len(accuracies)


# --------------------------------------------------------------------------- training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    lr: float
    improved: bool


@dataclass
class TrainResult:
    params: dict
    state: TrainState
    history: list

    @property
    def epochs_trained(self):
        return len(self.history)


def fit(
    x_train,
    y_train,
    x_val,
    y_val,
    config,
    sample_ids=None,
    params=None,
    checkpoint_path=None,
    n_workers=1,
):
    """Train from scratch (or from ``params``) and return the best-on-validation model.

    ``sample_ids`` are the global dataset indices of the training frames, used
    to key augmentation streams; they default to ``0..N-1``.
    """
    x_train = np.asarray(x_train, dtype=np.float32)
    y_train = np.asarray(y_train)
    if len(x_train) == 0 or len(x_val) == 0:
        raise ConfigurationError("training and validation sets must be non-empty")
    if sample_ids is None:
        sample_ids = np.arange(len(x_train))
    sample_ids = np.asarray(sample_ids)

    params = M.init_params(config.seed) if params is None else params
    state = TrainState.fresh(params, config)
    best = M.copy_params(params)
    history = []
    order_rng = np.random.default_rng([config.seed, 0x5EED])
    n_batches = len(x_train) // config.batch_size
    if n_batches == 0:
        raise ConfigurationError(
            f"{len(x_train)} training frames do not fill one batch of {config.batch_size}"
        )

    for epoch in range(1, config.max_epochs + 1):
        perm = order_rng.permutation(len(x_train))
        losses = []
        for b in range(n_batches):
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            xb = augment_batch(x_train[idx], config.augment, epoch, config.seed, sample_ids[idx], n_workers)
            logits, cache = M.forward(params, xb, train=True)
            loss, grads = M.loss_and_grads(params, cache, logits, y_train[idx])
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, batch {b}")
            adam_step(params, grads, state, config)
            losses.append(loss)

        val_acc, _ = evaluate(params, x_val, y_val)
        improved = record_validation(state, epoch, val_acc)
        if improved:
            best = M.copy_params(params)
            if checkpoint_path is not None:
                M.save_checkpoint(checkpoint_path, best, state.optimizer_state())
        lr_used = state.lr
        plateau_lr_update(state, val_acc, config)
        history.append(EpochRecord(epoch, float(np.mean(losses)), val_acc, lr_used, improved))
        log.info("epoch %d loss %.4f val %.2f%% lr %.2e%s", epoch, history[-1].train_loss,
                 val_acc, lr_used, " *" if improved else "")
        if early_stop_decision(state, config) == "stop":
            break
    return TrainResult(best, state, history)


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def train(dataset, split, config, checkpoint_path=None, n_workers=1):
    """Train on ``split.train``/``split.val`` and report on ``split.test``.

    Returns ``(best_params, FoldReport)``.
    """
    for name in ("train", "val", "test"):
        if len(getattr(split, name)) == 0:
            raise ConfigurationError(f"{name} split is empty")
    if (np.intersect1d(split.train, split.val).size or np.intersect1d(split.train, split.test).size
            or np.intersect1d(split.val, split.test).size):
        raise ConfigurationError("train/val/test splits overlap")
    result = fit(
        dataset.frames[split.train], dataset.labels[split.train],
        dataset.frames[split.val], dataset.labels[split.val],
        config, sample_ids=split.train, checkpoint_path=checkpoint_path, n_workers=n_workers,
    )
    acc, cm = evaluate(result.params, dataset.frames[split.test], dataset.labels[split.test])
    report = FoldReport(acc, cm, result.epochs_trained, result.state.best_epoch, result.history)
    return result.params, report


SCENARIOS = {"model1": (1,), "model2": (2,), "model3": (1, 2)}


def scenario_subset(dataset, scenario):
    """Frames of the operating conditions used by ``scenario`` (model1/2/3)."""
    try:
        ocs = SCENARIOS[scenario.lower()]
    except KeyError:
        raise ConfigurationError(f"unknown scenario {scenario!r}; choose from {sorted(SCENARIOS)}") from None
    for oc in ocs:
        if not np.any(dataset.oc == oc):
            raise ConfigurationError(f"scenario {scenario} needs OC{oc} frames, none present")
    idx = np.flatnonzero(np.isin(dataset.oc, ocs))
    sub = dataset.subset(idx)
    if len(ocs) > 1:
        per = np.array([np.bincount(sub.labels[sub.oc == oc], minlength=N_CLASSES) for oc in ocs])
        if not (per == per[0]).all():
            raise ConfigurationError(f"scenario {scenario} needs a balanced OC mixture, got per-class counts {per.tolist()}")
    return sub


def crossval_splits(dataset, k=5, seed=0, by_oc=False):
    """The k (train, val, test) splits used by :func:`crossval`."""
    folds = stratified_kfold(dataset, k, seed, by_oc=by_oc)
    splits = []
    for i, test in enumerate(folds):
        rest = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        tr, val = train_val_split(dataset, rest, 0.8, seed=[seed, i], by_oc=by_oc)
        splits.append(Split(tr, val, test))
    return splits


def crossval(dataset, scenario, config, k=5, checkpoint_dir=None, n_workers=1):
    """Run the k-fold protocol for one scenario and collect a :class:`CrossvalReport`."""
    sub = scenario_subset(dataset, scenario)
    by_oc = len(SCENARIOS[scenario.lower()]) > 1
    folds = []
    for i, split in enumerate(crossval_splits(sub, k, config.seed, by_oc)):
        ckpt = None
        if checkpoint_dir is not None:
            os.makedirs(checkpoint_dir, exist_ok=True)
            ckpt = os.path.join(checkpoint_dir, f"{scenario.lower()}_fold{i + 1}.vck")
        fold_config = replace(config, seed=int(np.random.SeedSequence([config.seed, i]).generate_state(1)[0]))
        _, report = train(sub, split, fold_config, checkpoint_path=ckpt, n_workers=n_workers)
        log.info("%s fold %d: %.2f%%", scenario, i + 1, report.accuracy)
        folds.append(report)
    return CrossvalReport(scenario.lower(), folds, config, config.seed)
