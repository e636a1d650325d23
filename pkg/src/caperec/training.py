"""Adam, evaluation, and the early-stopping training loop."""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import OOV, ContextBatch, make_batches
from .errors import ConfigError, TrainingError
from .metrics import MetricsReport, auc, gauc, logloss, ndcg_at_k, recall_at_k
from .seeding import rng_for

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 1024
    max_epochs: int = 20
    early_stop_patience: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_batch_size: int = 1024
    eval_negatives: int = 20
    ranking_ks: list = field(default_factory=lambda: [1, 5, 10])

    def problems(self):
        errs = []
        if self.learning_rate < 0:
            errs.append(f"train.learning_rate={self.learning_rate} must be >= 0")
        for name in ("batch_size", "max_epochs", "eval_batch_size"):
            if getattr(self, name) < 1:
                errs.append(f"train.{name}={getattr(self, name)} must be >= 1")
        if self.early_stop_patience < 1:
            errs.append(f"train.early_stop_patience={self.early_stop_patience} must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            errs.append("train.beta1 and train.beta2 must lie in [0, 1)")
        if self.adam_eps <= 0:
            errs.append(f"train.adam_eps={self.adam_eps} must be > 0")
        if self.eval_negatives < 0:
            errs.append(f"train.eval_negatives={self.eval_negatives} must be >= 0")
        if any(k < 1 or k > self.eval_negatives + 1 for k in self.ranking_ks):
            errs.append(f"train.ranking_ks={self.ranking_ks} must lie in [1, eval_negatives + 1]")
        return errs

    def validate(self):
        errs = self.problems()
        if errs:
            raise ConfigError("invalid train config:\n  " + "\n  ".join(errs))
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**raw)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    def __init__(self, tensors, lr=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.tensors = list(tensors)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState()

    def step(self):
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.tensors]
        adam_step([t.data for t in self.tensors], grads, self.state, self.lr, *self.betas, self.eps)

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None


# ---------------------------------------------------------------- evaluation


def item_category_table(n_items, *datasets):
    """Dense item id -> dense category id, from every (item, category) pair seen."""
    table = np.full(n_items, OOV, dtype=np.int64)
    table[0] = 0
    for data in datasets:
        mask = np.arange(data.items.shape[1])[None, :] < data.lengths[:, None]
        table[data.items[mask]] = data.cats[mask]
        table[data.target_items] = data.target_cats
    return table


def predict(model, data, batch_size=1024):
    out = [model.predict(b) for b in make_batches(data, batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def _ranking_candidates(data, pos_rows, item_cats, n_neg, seed):
    """Target first, then ``n_neg`` items outside the history; identical on every call."""
    rng = rng_for(seed, "sampling")
    n_items = len(item_cats)
    items = np.zeros((len(pos_rows), n_neg + 1), dtype=np.int64)
    for r, i in enumerate(pos_rows):
        hist = data.items[i, : data.lengths[i]]
        banned = np.zeros(n_items, dtype=bool)
        banned[:2] = True
        banned[hist] = True
        banned[data.target_items[i]] = True
        pool = np.flatnonzero(~banned)
        items[r, 0] = data.target_items[i]
        items[r, 1:] = rng.choice(pool, size=n_neg, replace=len(pool) < n_neg)
    return items, item_cats[items]


def evaluate(model, data, cfg, item_cats=None, epoch=0):
    """AUC, gAUC, logloss and (when candidates can be drawn) Recall@K / NDCG@K."""
    probs = predict(model, data, cfg.eval_batch_size)
    report = MetricsReport(
        auc=auc(probs, data.labels),
        gauc=gauc(probs, data.labels, data.user_ids),
        logloss=logloss(probs, data.labels),
        epoch=epoch,
        seed=cfg.seed,
    )
    if item_cats is not None and cfg.eval_negatives > 0 and cfg.ranking_ks:
        pos_rows = np.flatnonzero(data.labels == 1)
        if len(pos_rows):
            cand_items, cand_cats = _ranking_candidates(data, pos_rows, item_cats, cfg.eval_negatives, cfg.seed)
            scores = []
            for start in range(0, len(pos_rows), cfg.eval_batch_size):
                rows = pos_rows[start:start + cfg.eval_batch_size]
                batch = ContextBatch.from_encoded(data, rows)
                sl = slice(start, start + len(rows))
                scores.append(model.candidate_scores(batch, cand_items[sl], cand_cats[sl]))
            scores = np.concatenate(scores)
            report.recall_at_k = {k: recall_at_k(scores, 0, k) for k in cfg.ranking_ks}
            report.ndcg_at_k = {k: ndcg_at_k(scores, 0, k) for k in cfg.ranking_ks}
    return report


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_auc: float
    history: list  # one dict per epoch: valid MetricsReport fields + train_loss
    epochs_run: int


def _epoch_seed(seed, epoch):
    return int(np.random.SeedSequence([int(seed) & (2**64 - 1), epoch]).generate_state(1)[0])


def train(model, train_data, valid_data, cfg, item_cats=None, on_epoch=None):
    """Adam + early stopping on validation AUC; restores the best parameters on return."""
    cfg.validate()
    opt = Adam(model.parameters(), cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    best_auc, best_epoch, best_state = -math.inf, 0, model.state_dict()
    history, bad, epoch = [], 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        total, count = 0.0, 0
        for i, batch in enumerate(make_batches(train_data, cfg.batch_size, _epoch_seed(cfg.seed, epoch))):
            opt.zero_grad()
            loss = model.loss(batch)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {i}")
            loss.backward()
            opt.step()
            total += value * len(batch)
            count += len(batch)
        report = evaluate(model, valid_data, cfg, item_cats, epoch=epoch)
        row = report.to_dict()
        row["train_loss"] = total / max(count, 1)
        history.append(row)
        improved = report.auc > best_auc
        if improved:
            best_auc, best_epoch, best_state, bad = report.auc, epoch, model.state_dict(), 0
        else:
            bad += 1
        logger.info("epoch %d valid auc %.5f loss %.5f%s", epoch, report.auc, row["train_loss"], " *" if improved else "")
        if on_epoch is not None:
            on_epoch(row)
        if bad >= cfg.early_stop_patience:
            break
    model.load_state_dict(best_state)
    return TrainResult(best_state, best_epoch, best_auc, history, epoch)
