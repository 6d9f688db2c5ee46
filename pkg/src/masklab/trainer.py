"""Self-supervised explainer training against a frozen expert."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nm
from .errors import TrainingFailure, UsageError
from .explainer import overlay, save_checkpoint, split_masks
from .numeric import Tensor

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (42, 13, 62)
LOG_FIELDS = ("epoch", "split", "loss_total", "loss_bc", "loss_e", "loss_avg", "loss_smooth", "loss_l2")
TERMS = ("loss_bc", "loss_e", "loss_avg", "loss_smooth", "loss_l2")


@dataclass
class LossWeights:
    lambda_e: float = 1.0
    lambda_avg: float = 0.3
    lambda_smooth: float = 1.0
    lambda_l2: float = 0.01

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise UsageError(f"{k} must be nonnegative, got {v}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 16
    epochs: int = 50
    seed: int = 42
    weights: LossWeights = field(default_factory=LossWeights)
    eval_batch_size: int = 16

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise UsageError("learning_rate must be positive")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")


def _batched(x):
    return nm.reshape(x, (1,) + x.shape) if x.ndim == 1 else x


def loss_bc(p, actions, n_actions=None):
    """-(1/K) log p[a], averaged over the batch."""
    p = _batched(p)
    k = n_actions or p.shape[1]
    sel = np.zeros(p.shape, dtype=p.data.dtype)
    sel[np.arange(p.shape[0]), np.atleast_1d(actions)] = 1.0
    picked = nm.reduce_sum(nm.log(p) * Tensor(sel), axis=1)
    return nm.reduce_mean(picked) * (-1.0 / k)


def loss_entropy(p_tilde, n_actions=None):
    """(1/K) sum_k p log p, averaged over the batch; minimal at uniform."""
    p = _batched(p_tilde)
    k = n_actions or p.shape[1]
    return nm.reduce_mean(nm.reduce_sum(p * nm.log(p), axis=1)) * (1.0 / k)


def _spatial(x):
    return nm.reshape(x, (1,) + x.shape) if x.ndim == 2 else x


def loss_avg(active, non_target):
    """Mean of the active mask plus mean of the non-target mask."""
    return nm.reduce_mean(_spatial(active)) + nm.reduce_mean(_spatial(non_target))


def total_variation(x):
    """Sum of vertical and horizontal absolute neighbour differences over W*H, batch-averaged."""
    x = _spatial(x)
    n, h, w = x.shape
    if h < 2 or w < 2:
        raise UsageError("total variation needs masks of at least 2x2")
    dv = nm.reduce_sum(nm.absolute(x[:, :-1, :] - x[:, 1:, :]))
    dh = nm.reduce_sum(nm.absolute(x[:, :, :-1] - x[:, :, 1:]))
    return (dv + dh) * (1.0 / (n * h * w))


def loss_smooth(active, non_target):
    return total_variation(active) + total_variation(non_target)


def loss_terms(states, actions, model, policy, r):
    """Unweighted batch-mean loss terms as graph-connected scalars."""
    s = states if isinstance(states, Tensor) else Tensor(states)
    actions = np.atleast_1d(np.asarray(actions, dtype=np.int64))
    masks = model.forward(s)
    if not np.isfinite(masks.data).all():
        raise TrainingFailure("explainer produced non-finite masks; parameters diverged", term="masks")
    active, complement, non_target = split_masks(masks, actions)
    n = s.shape[0]
    probs = policy(nm.concat([overlay(s, active, r), overlay(s, complement, r)], axis=0))
    p, p_tilde = probs[:n], probs[n:]
    k = masks.shape[1]
    return {
        "loss_bc": loss_bc(p, actions, k),
        "loss_e": loss_entropy(p_tilde, k),
        "loss_avg": loss_avg(active, non_target),
        "loss_smooth": loss_smooth(active, non_target),
        "loss_l2": model.params.sum_of_squares(),
    }


def total_loss(states, actions, model, policy, r, weights=None):
    """Weighted objective and its individual (unweighted) terms."""
    w = weights or LossWeights()
    terms = loss_terms(states, actions, model, policy, r)
    total = (terms["loss_bc"] + terms["loss_e"] * w.lambda_e + terms["loss_avg"] * w.lambda_avg
             + terms["loss_smooth"] * w.lambda_smooth + terms["loss_l2"] * w.lambda_l2)
    return total, terms


@dataclass
class TrainResult:
    model: object
    log: list
    best_epoch: int
    best_valid: float


def _check_finite(total, terms, epoch):
    if math.isfinite(total.item()):
        return
    bad = [k for k, v in terms.items() if not math.isfinite(v.item())]
    term = bad[0] if bad else "loss_total"
    raise TrainingFailure(f"non-finite loss at epoch {epoch}: {term} diverged "
                          f"({', '.join(f'{k}={v.item():.4g}' for k, v in terms.items())})", term=term)


def evaluate_loss(model, policy, states, actions, r, weights, batch_size=16):
    """Sample-weighted mean of the total loss and its terms over a split."""
    sums = dict.fromkeys(("loss_total",) + TERMS, 0.0)
    n = len(actions)
    if n == 0:
        return {k: float("nan") for k in sums}
    with nm.no_grad():
        for i in range(0, n, batch_size):
            total, terms = total_loss(states[i:i + batch_size], actions[i:i + batch_size], model,
                                      policy, r, weights)
            b = len(actions[i:i + batch_size])
            sums["loss_total"] += total.item() * b
            for k, v in terms.items():
                sums[k] += v.item() * b
    return {k: v / n for k, v in sums.items()}


def train(model, policy, dataset, config, r, checkpoint_path=None, log_path=None):
    """Adam over the train split, keeping the parameters with the best validation loss.

    The policy must be frozen; its parameters are never touched.
    """
    if not policy.params.frozen:
        raise UsageError("expert policy must be frozen before training the explainer")
    rng = np.random.default_rng(config.seed)
    opt = nm.Adam(lr=config.learning_rate)
    train_idx = np.asarray(dataset.split["train"], dtype=np.int64)
    valid_idx = np.asarray(dataset.split["valid"], dtype=np.int64)
    if len(train_idx) == 0:
        raise UsageError("dataset has an empty train split")
    weights = config.weights
    rows = []
    best_valid, best_epoch, best_state = math.inf, 0, model.params.state_dict()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_idx)
        sums = dict.fromkeys(("loss_total",) + TERMS, 0.0)
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            model.params.zero_grad()
            total, terms = total_loss(dataset.states[idx], dataset.actions[idx], model, policy, r, weights)
            _check_finite(total, terms, epoch)
            total.backward()
            opt.step(model.params)
            sums["loss_total"] += total.item() * len(idx)
            for k, v in terms.items():
                sums[k] += v.item() * len(idx)
        train_row = {k: v / len(order) for k, v in sums.items()}
        valid_row = evaluate_loss(model, policy, dataset.states[valid_idx], dataset.actions[valid_idx], r,
                                  weights, config.eval_batch_size)
        rows.append({"epoch": epoch, "split": "train", **train_row})
        rows.append({"epoch": epoch, "split": "valid", **valid_row})
        log.info("epoch %d: train %.5f valid %.5f", epoch, train_row["loss_total"], valid_row["loss_total"])
        score = valid_row["loss_total"] if len(valid_idx) else train_row["loss_total"]
        if score < best_valid:
            best_valid, best_epoch, best_state = score, epoch, model.params.state_dict()
    model.params.load_state_dict(best_state)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model.params,
                        {**model.config(), "epoch": best_epoch, "seed": config.seed,
                         "best_valid": _round9(best_valid)})
    if log_path is not None:
        write_log(log_path, rows)
    return TrainResult(model, rows, best_epoch, best_valid)


def _round9(x):
    return float(f"{x:.9g}") if math.isfinite(x) else None


def write_log(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for row in rows:
            writer.writerow([row["epoch"], row["split"]] + [f"{row[k]:.9g}" for k in LOG_FIELDS[2:]])
