"""Squared-hinge training, stratified k-fold cross-validation and scoring."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .dataio import TrialSet
from .layers import ModelConfig, ModelParams, init_params, model_forward
from .tensor import Tensor

logger = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    folds: int = 5
    seed: int = 0
    eval_batch_size: int = 64

    def validate(self) -> None:
        for name in ("epochs", "batch_size", "folds", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FoldReport:
    fold_index: int
    train_loss_history: list[float]
    test_accuracy: float
    confusion: np.ndarray
    test_indices: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "fold_index": self.fold_index,
            "train_loss_history": [float(v) for v in self.train_loss_history],
            "test_accuracy": float(self.test_accuracy),
            "n_test": int(self.confusion.sum()),
            "confusion": self.confusion.astype(int).tolist(),
            "test_indices": [int(i) for i in self.test_indices],
        }


def squared_hinge_loss(scores: Tensor, labels) -> Tensor:
    """One-vs-rest squared hinge, averaged over batch and classes."""
    labels = np.asarray(labels, dtype=np.int64)
    B, K = scores.shape
    if labels.shape != (B,):
        raise ValueError(f"{B} score rows but labels of shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    targets = -np.ones((B, K))
    targets[np.arange(B), labels] = 1.0
    margin = T.relu(1.0 - scores * targets)
    return (margin * margin).mean()


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffle within each class, lay the classes end to end and deal the
    sequence round-robin into ``k`` folds. Per-class fold counts then differ
    by at most one, and remainders rotate across classes."""
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() < k:
        small = classes[counts < k].tolist()
        raise ValueError(f"classes {small} have fewer than {k} members")
    rng = np.random.default_rng(seed)
    order = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        order.append(rng.permutation(members))
    order = np.concatenate(order)
    fold_of = np.empty(labels.size, dtype=np.int64)
    fold_of[order] = np.arange(order.size) % k
    all_idx = np.arange(labels.size)
    return [(all_idx[fold_of != f], all_idx[fold_of == f]) for f in range(k)]


class Adam:
    def __init__(self, params: list[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def fit_normalization(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = data.mean(axis=(0, 2))
    std = data.std(axis=(0, 2))
    return mean, np.where(std > 0, std, 1.0)


def normalize(data: np.ndarray, params: ModelParams) -> np.ndarray:
    mean = params.buffers["input.mean"][None, :, None]
    std = params.buffers["input.std"][None, :, None]
    return ((data - mean) / std)[:, None, :, :]


def _check_dims(trials: TrialSet, cfg: ModelConfig) -> None:
    if (trials.n_channels, trials.n_samples) != (cfg.n_channels, cfg.n_samples):
        raise ValueError(
            f"trials are {trials.n_channels}x{trials.n_samples}, model expects "
            f"{cfg.n_channels}x{cfg.n_samples}"
        )
    if trials.n_classes != cfg.n_classes:
        raise ValueError(f"trials declare {trials.n_classes} classes, model has {cfg.n_classes}")


def train_one_fold(
    params: ModelParams,
    train: TrialSet,
    cfg: TrainConfig,
    seed: Optional[int] = None,
    on_epoch: Optional[Callable[[int, ModelParams], bool]] = None,
) -> tuple[ModelParams, list[float]]:
    """Train ``params`` in place on ``train``; return them with the per-epoch
    mean mini-batch loss. Input z-score statistics are fit here and stored
    in the params buffers. ``on_epoch(epoch, params)`` returning True stops
    training early."""
    cfg.validate()
    mcfg = params.config
    _check_dims(train, mcfg)
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    mean, std = fit_normalization(train.data)
    params.buffers["input.mean"][:] = mean
    params.buffers["input.std"][:] = std
    x_all = normalize(train.data, params)
    y_all = train.labels
    opt = Adam(params.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    history: list[float] = []
    n = train.n_trials
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            params.zero_grad()
            scores, _ = model_forward(Tensor(x_all[idx]), params, mcfg, training=True, rng=rng)
            loss = squared_hinge_loss(scores, y_all[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            loss.backward()
            loss.clear_graph()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        history.append(total / count)
        logger.debug("epoch %d loss %.6f", epoch, history[-1])
        if on_epoch is not None and on_epoch(epoch, params):
            break
    return params, history


def predict_scores(params: ModelParams, trials: TrialSet, batch_size: int = 64) -> np.ndarray:
    if "input.mean" not in params.buffers:
        raise ValueError("params carry no input normalization statistics")
    _check_dims(trials, params.config)
    x = normalize(trials.data, params)
    out = [
        model_forward(Tensor(x[s : s + batch_size]), params, params.config, training=False)[0].data
        for s in range(0, trials.n_trials, batch_size)
    ]
    return np.concatenate(out) if out else np.zeros((0, params.config.n_classes))


def score_predictions(scores: np.ndarray, labels, n_classes: int) -> tuple[float, np.ndarray]:
    """Argmax (ties go to the lowest class) accuracy and confusion matrix,
    rows indexed by true class."""
    labels = np.asarray(labels, dtype=np.int64)
    pred = np.argmax(scores, axis=1)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    acc = float(np.trace(confusion) / labels.size) if labels.size else 0.0
    return acc, confusion


def evaluate(params: ModelParams, test: TrialSet, fold_index: int = 0,
             history: Optional[list[float]] = None, batch_size: int = 64) -> FoldReport:
    scores = predict_scores(params, test, batch_size)
    acc, confusion = score_predictions(scores, test.labels, params.config.n_classes)
    return FoldReport(fold_index, list(history or []), acc, confusion)


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _run_fold(args) -> tuple[FoldReport, ModelParams]:
    dataset, mcfg, cfg, fold, train_idx, test_idx = args
    params = init_params(mcfg, fold_seed(cfg.seed, fold))
    params, history = train_one_fold(params, dataset.subset(train_idx), cfg, seed=fold_seed(cfg.seed + 1, fold))
    report = evaluate(params, dataset.subset(test_idx), fold, history, cfg.eval_batch_size)
    report.test_indices = test_idx.tolist()
    return report, params


@dataclass
class CVResult:
    folds: list[FoldReport]
    mean: float
    std: float
    chance: float
    fold_seconds: list[float] = field(default_factory=list)
    fold_params: list[ModelParams] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {"mean_accuracy": self.mean, "std_accuracy": self.std, "chance": self.chance,
                "fold_accuracies": [f.test_accuracy for f in self.folds]}


def cross_validate(dataset: TrialSet, mcfg: ModelConfig, cfg: TrainConfig, parallel_folds: int = 1) -> CVResult:
    """Independent model per fold; ``std`` is the sample standard deviation."""
    cfg.validate()
    _check_dims(dataset, mcfg)
    splits = stratified_kfold(dataset.labels, cfg.folds, cfg.seed)
    jobs = [(dataset, mcfg, cfg, f, tr, te) for f, (tr, te) in enumerate(splits)]
    seconds = []
    if parallel_folds > 1:
        with ProcessPoolExecutor(max_workers=parallel_folds) as pool:
            outcomes = list(pool.map(_run_fold, jobs))
    else:
        outcomes = []
        for job in jobs:
            t0 = time.perf_counter()
            outcomes.append(_run_fold(job))
            seconds.append(time.perf_counter() - t0)
            logger.info("fold %d accuracy %.4f", job[3], outcomes[-1][0].test_accuracy)
    reports = [r for r, _ in outcomes]
    accs = np.array([r.test_accuracy for r in reports])
    std = float(accs.std(ddof=1)) if accs.size > 1 else 0.0
    return CVResult(reports, float(accs.mean()), std, 1.0 / mcfg.n_classes, seconds, [p for _, p in outcomes])
