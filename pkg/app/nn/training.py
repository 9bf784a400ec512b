import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.config import RunConfig
from app.dataset.augment import augment, derive_seed
from app.dataset.stacking import ChannelStack, branch_inputs
from app.errors import DivergedLoss, EmptyDataset
from app.nn.checkpoint import ModelCheckpoint, rng_state_bytes
from app.nn.model import ModelParams, init_params, loss_and_grads, predict, sgd_step

logger = logging.getLogger(__name__)

Sample = Tuple[ChannelStack, int]


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_acc: float
    lr: float


@dataclass
class TrainingResult:
    checkpoint: ModelCheckpoint
    history: List[EpochStats]


def learning_rate(epoch_index: int, config: RunConfig) -> float:
    """Step schedule; epoch_index is 0-based, so index 10 is the 11th epoch."""
    return config.lr if epoch_index < config.lr_drop_epoch else config.lr_after_drop


def batch_inputs(kind: str, stacks: Sequence[ChannelStack]) -> Tuple[np.ndarray, ...]:
    """Per-branch (N, C, H, W) float64 batches."""
    per_sample = [branch_inputs(kind, s) for s in stacks]
    return tuple(
        np.stack([branches[b] for branches in per_sample]).astype(np.float64)
        for b in range(len(per_sample[0]))
    )


def accuracy(params: ModelParams, samples: Sequence[Sample], batch_size: int = 32) -> float:
    if not samples:
        raise EmptyDataset("no samples to score")
    correct = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        labels, _ = predict(params, batch_inputs(params.architecture, [s for s, _ in chunk]))
        correct += sum(int(p) == int(t) for p, (_, t) in zip(labels, chunk))
    return correct / len(samples)


def _snapshot(params: ModelParams) -> ModelParams:
    return params.astype(np.float32)


def train(kind: str, train_set: Sequence[Sample], val_set: Sequence[Sample], config: RunConfig) -> TrainingResult:
    """Minibatch SGD with a step learning-rate drop.

    Shuffling and augmentation are seeded from config.seed, so two runs with
    the same data and config produce identical checkpoints. The checkpoint
    returned is the epoch with the best validation accuracy (earliest on
    ties); an empty val_set scores on the training set.
    """
    if not train_set:
        raise EmptyDataset("training set is empty")
    for _, label in train_set:
        if label not in (0, 1, 2):
            raise ValueError(f"label {label} outside 0..2")
    val_set = val_set or train_set

    params = init_params(kind, config.widths, config.seed)
    rng = np.random.default_rng(config.seed)
    history: List[EpochStats] = []
    best_acc = -1.0
    best: Optional[ModelCheckpoint] = None

    logger.info(
        f"Training {kind} on {len(train_set)} samples ({len(val_set)} validation), "
        f"{config.epochs} epochs, batch {config.batch_size}"
    )
    for epoch in range(config.epochs):
        lr = learning_rate(epoch, config)
        order = rng.permutation(len(train_set))
        total = 0.0

        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            stacks, labels = [], []
            for i in idx:
                stack, label = train_set[int(i)]
                if config.augment:
                    stack = augment(stack, derive_seed(config.seed, epoch, int(i)), config.rotation_range)
                stacks.append(stack)
                labels.append(label)

            loss, grads = loss_and_grads(params, batch_inputs(kind, stacks), labels)
            if not math.isfinite(loss):
                logger.error(f"Loss became {loss} at epoch {epoch + 1}")
                raise DivergedLoss(f"non-finite loss at epoch {epoch + 1}, batch starting {start}")
            sgd_step(params, grads, lr)
            total += loss * len(idx)

        stats = EpochStats(epoch + 1, total / len(train_set), accuracy(params, val_set), lr)
        history.append(stats)
        logger.info(
            f"[{stats.epoch}/{config.epochs}] loss {stats.train_loss:.4f}  val acc {stats.val_acc:.4f}  lr {lr:g}"
        )
        if stats.val_acc > best_acc:
            best_acc = stats.val_acc
            best = ModelCheckpoint(_snapshot(params), stats.epoch, rng_state_bytes(rng))

    logger.info(f"✓ Best validation accuracy {best_acc:.4f} at epoch {best.epoch}")
    return TrainingResult(best, history)
