"""Standard and adversarial (PGD-l2) training of the small classifiers.

The inner maximization perturbs each batch within an l2 ball of radius
epsilon_l2 before the usual SGD-with-momentum step; epsilon_l2 = 0 skips
the inner loop entirely, giving standard training.  Runs are deterministic
per (config seed, dataset).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import tensor as T
from .models import ArchSpec, Classifier, Provenance, build_classifier, build_network, predict
from .util import rng_for


class TrainingError(RuntimeError):
    """Training aborted (divergence or invalid configuration)."""


@dataclass
class RobustTrainConfig:
    epsilon_l2: float = 0.0  # 0 disables the inner maximization
    pgd_steps: int = 7
    pgd_step_scale: float = 0.3  # step length as a fraction of epsilon_l2
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    augment: bool = True
    pgd_random_start: bool = False
    grad_clip: float = 5.0  # global l2 norm ceiling; 0 disables

    def __post_init__(self):
        if self.epsilon_l2 < 0:
            raise TrainingError("epsilon_l2 must be >= 0")
        if not (0 < self.pgd_step_scale <= 1):
            raise TrainingError("pgd_step_scale must be in (0, 1]")


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    clean_train_acc: List[float] = field(default_factory=list)
    clean_test_acc: List[float] = field(default_factory=list)
    adv_train_acc: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class PgdEval:
    """Attack spec for robustness evaluation."""

    epsilon_l2: float
    steps: int = 7
    step_scale: float = 0.3
    seed: int = 0


def _per_image_l2(arr: np.ndarray) -> np.ndarray:
    flat = arr.reshape(arr.shape[0], -1).astype(np.float64)
    return np.sqrt((flat * flat).sum(axis=1)).astype(np.float32)


def pgd_l2(
    classifier: Classifier,
    batch: np.ndarray,
    labels: np.ndarray,
    eps2: float,
    steps: int,
    step_scale: float,
    seed: int = 0,
    random_start: bool = False,
) -> np.ndarray:
    """l2-bounded PGD ascent on cross-entropy; returns the perturbed batch.

    Each step moves step_scale * eps2 along the l2-normalized input
    gradient; after every step the perturbation is projected back onto the
    eps2 ball and the image clipped to [0, 1].
    """
    if eps2 <= 0:
        raise TrainingError(f"pgd_l2 requires eps2 > 0, got {eps2} (skip the call instead)")
    batch = np.asarray(batch, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if random_start:
        rng = rng_for(seed, 0x96D)
        delta = rng.standard_normal(batch.shape).astype(np.float32)
        norms = np.maximum(_per_image_l2(delta), 1e-12)
        radii = eps2 * rng.random(batch.shape[0]).astype(np.float32) ** (
            1.0 / batch[0].size
        )
        delta *= (radii / norms).reshape(-1, 1, 1, 1)
        delta = np.clip(batch + delta, 0.0, 1.0) - batch
    else:
        delta = np.zeros_like(batch)
    step_len = step_scale * eps2
    for _ in range(steps):
        g = T.Graph()
        xp = g.variable(batch + delta)
        logits, _, _ = build_network(classifier, xp, trainable=False)
        loss = T.softmax_cross_entropy(logits, labels)
        grad = T.backward(loss)[xp.node].values
        norms = np.maximum(_per_image_l2(grad), 1e-12)
        delta = delta + step_len * grad / norms.reshape(-1, 1, 1, 1)
        norms = _per_image_l2(delta)
        over = norms > eps2
        if over.any():
            scale = np.ones_like(norms)
            scale[over] = eps2 / norms[over]
            delta = delta * scale.reshape(-1, 1, 1, 1)
        delta = np.clip(batch + delta, 0.0, 1.0) - batch
    return batch + delta


def _augment(batch: np.ndarray, rng: np.random.Generator, max_shift: int = 4) -> np.ndarray:
    """Random horizontal flip plus random shift with zero padding."""
    out = np.zeros_like(batch)
    n, _, h, w = batch.shape
    flips = rng.random(n) < 0.5
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    for i in range(n):
        img = batch[i, :, :, ::-1] if flips[i] else batch[i]
        dy, dx = int(shifts[i, 0]), int(shifts[i, 1])
        sy0, sy1 = max(0, -dy), min(h, h - dy)
        sx0, sx1 = max(0, -dx), min(w, w - dx)
        out[i, :, sy0 + dy : sy1 + dy, sx0 + dx : sx1 + dx] = img[:, sy0:sy1, sx0:sx1]
    return out


def adversarial_train(arch: ArchSpec, dataset, cfg: RobustTrainConfig, testset=None):
    """Mini-batch SGD with momentum/weight decay on (possibly PGD-perturbed)
    batches.  Returns (classifier, history).
    """
    if len(dataset) == 0:
        raise TrainingError("cannot train on an empty dataset")
    classifier = build_classifier(arch, cfg.seed)
    params = {k: v.copy() for k, v in classifier.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = rng_for(cfg.seed, 0x7A21)
    history = TrainHistory()
    n = len(dataset)
    eval_cap = 2000  # history accuracies are measured on capped subsamples
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        adv_hits = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            xb = dataset.images[idx]
            yb = dataset.labels[idx]
            if cfg.augment:
                xb = _augment(xb, rng)
            snapshot = classifier.with_params(params)
            if cfg.epsilon_l2 > 0:
                xb = pgd_l2(
                    snapshot, xb, yb, cfg.epsilon_l2, cfg.pgd_steps, cfg.pgd_step_scale,
                    seed=cfg.seed, random_start=cfg.pgd_random_start,
                )
            g = T.Graph()
            batch_t = g.variable(xb)
            logits, _, param_tensors = build_network(snapshot, batch_t, trainable=True)
            loss = T.softmax_cross_entropy(logits, yb)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingError(
                    f"loss diverged at epoch {epoch} batch {lo // cfg.batch_size}"
                )
            losses.append(loss_val)
            adv_hits += int((np.argmax(logits.values, axis=1) == yb).sum())
            grads = T.backward(loss)
            raw = {name: grads[pt.node].values for name, pt in param_tensors.items()}
            if cfg.grad_clip > 0:
                total = np.sqrt(
                    sum(float(np.sum(g.astype(np.float64) ** 2)) for g in raw.values())
                )
                if total > cfg.grad_clip:
                    factor = np.float32(cfg.grad_clip / total)
                    raw = {name: g * factor for name, g in raw.items()}
            for name in param_tensors:
                gmat = raw[name] + cfg.weight_decay * params[name]
                velocity[name] = cfg.momentum * velocity[name] + gmat
                params[name] = params[name] - cfg.learning_rate * velocity[name]
        trained = classifier.with_params(params)
        history.train_loss.append(float(np.mean(losses)))
        history.adv_train_acc.append(adv_hits / n)
        probe = dataset.subset(eval_cap, seed=cfg.seed)
        history.clean_train_acc.append(evaluate_accuracy(trained, probe))
        if testset is not None and len(testset):
            tprobe = testset.subset(eval_cap, seed=cfg.seed)
            history.clean_test_acc.append(evaluate_accuracy(trained, tprobe))
        else:
            history.clean_test_acc.append(float("nan"))
    final = Classifier(
        arch,
        params,
        Provenance(epsilon_l2=cfg.epsilon_l2, seed=cfg.seed, epochs=cfg.epochs),
    )
    return final, history


def evaluate_accuracy(
    classifier: Classifier, dataset, attack: Optional[PgdEval] = None, batch_size: int = 256
) -> float:
    """Fraction of argmax-correct predictions, optionally under PGD-l2."""
    if len(dataset) == 0:
        raise TrainingError("cannot evaluate on an empty dataset")
    hits = 0
    for lo in range(0, len(dataset), batch_size):
        xb = dataset.images[lo : lo + batch_size]
        yb = dataset.labels[lo : lo + batch_size]
        if attack is not None:
            xb = pgd_l2(
                classifier, xb, yb, attack.epsilon_l2, attack.steps, attack.step_scale,
                seed=attack.seed,
            )
        hits += int((predict(classifier, xb, batch_size) == yb).sum())
    return hits / len(dataset)


def write_history_csv(history: TrainHistory, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "clean_train_acc", "clean_test_acc", "adv_train_acc"])
        for i in range(len(history.train_loss)):
            writer.writerow(
                [
                    i,
                    f"{history.train_loss[i]:.6g}",
                    f"{history.clean_train_acc[i]:.6g}",
                    f"{history.clean_test_acc[i]:.6g}",
                    f"{history.adv_train_acc[i]:.6g}",
                ]
            )
