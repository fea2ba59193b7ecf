"""Training loop with best-validation-loss checkpointing."""

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from platenet import model as model_io
from platenet.errors import TrainingError
from platenet.optim import Adam, bce, bce_logits_grad

HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "checkpointed")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    seed: int = 123
    checkpoint_path: str = None
    threshold: float = 0.5
    learning_rate: float = 0.001

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    checkpointed: bool = False


@dataclass
class History:
    records: list = field(default_factory=list)

    @property
    def checkpoint_epochs(self):
        return [r.epoch for r in self.records if r.checkpointed]

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def __len__(self):
        return len(self.records)


def _accuracy_count(probs, labels, threshold):
    pred = (probs.reshape(-1) >= threshold).astype(np.float32)
    return int(np.sum(pred == labels.reshape(-1)))


def evaluate_split(model, batches, threshold=0.5):
    """Example-weighted mean BCE and thresholded accuracy, dropout off."""
    total, loss_sum, correct = 0, 0.0, 0
    for batch in batches:
        probs = model.forward(batch.inputs, training=False)
        n = len(batch)
        loss_sum += bce(probs, batch.labels).loss * n
        correct += _accuracy_count(probs, batch.labels, threshold)
        total += n
    if total == 0:
        raise ValueError("evaluate_split needs at least one example")
    return loss_sum / total, correct / total


def _batches_for(source, epoch):
    return source(epoch) if callable(source) else source


def train(model, train_batches, val_batches, config=None, log=None):
    """Fit ``model`` and return ``(best_model, history)``.

    ``train_batches`` / ``val_batches`` are either iterables of
    :class:`~platenet.dataset.Batch` or callables ``epoch -> iterable`` (so the
    training stream can be reshuffled and re-augmented per epoch; ``epoch``
    starts at 0). After every epoch the model is written to
    ``config.checkpoint_path`` if its validation loss is strictly below the
    best seen so far. ``log`` receives one progress string at a time.
    """
    config = config or TrainConfig()
    emit = log or (lambda line: None)
    optimizer = Adam(model, learning_rate=config.learning_rate)
    history = History()
    best_loss, best_weights = math.inf, None
    from_logits = model.layers[-1].activation == "sigmoid"

    for epoch in range(config.epochs):
        emit(f"Epoch {epoch + 1}/{config.epochs}")
        seen, loss_sum, correct, steps = 0, 0.0, 0, 0
        for b, batch in enumerate(_batches_for(train_batches, epoch)):
            probs = model.forward(batch.inputs, training=True)
            loss = bce(probs, batch.labels)
            if not math.isfinite(loss.loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}",
                                    history, epoch + 1, b + 1)
            grad = bce_logits_grad(probs, batch.labels) if from_logits else loss.grad
            model.backward(grad, from_logits=from_logits)
            optimizer.step()
            n = len(batch)
            seen += n
            loss_sum += loss.loss * n
            correct += _accuracy_count(probs, batch.labels, config.threshold)
            steps += 1
        if seen == 0:
            raise TrainingError(f"epoch {epoch + 1} produced no training batches", history, epoch + 1)
        train_loss, train_acc = loss_sum / seen, correct / seen
        val_loss, val_acc = evaluate_split(model, _batches_for(val_batches, epoch), config.threshold)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch + 1}", history, epoch + 1)

        record = EpochRecord(epoch + 1, train_loss, train_acc, val_loss, val_acc)
        if val_loss < best_loss:
            target = config.checkpoint_path
            if target is not None:
                emit(f"Epoch {epoch + 1}: val_loss improved from {best_loss:.5f} to {val_loss:.5f}, "
                     f"saving model to {target}")
                try:
                    model_io.save(model, target)
                except OSError as exc:
                    raise TrainingError(f"checkpoint write failed at epoch {epoch + 1}: {exc}",
                                        history, epoch + 1) from exc
            else:
                emit(f"Epoch {epoch + 1}: val_loss improved from {best_loss:.5f} to {val_loss:.5f}")
            best_loss, best_weights = val_loss, model.get_weights()
            record.checkpointed = True
        else:
            emit(f"Epoch {epoch + 1}: val_loss did not improve from {best_loss:.5f}")
        history.records.append(record)
        emit(f"{steps}/{steps} - loss: {train_loss:.4f} - accuracy: {train_acc:.4f} - "
             f"val_loss: {val_loss:.4f} - val_accuracy: {val_acc:.4f}")

    if config.checkpoint_path is not None:
        best = model_io.load(config.checkpoint_path)
    else:
        best = copy.deepcopy(model)
        best.set_weights(best_weights)
    best.optimizer_steps = optimizer.t
    return best, history


# ---------------------------------------------------------------- history file


def format_history(history):
    lines = ["\t".join(HISTORY_COLUMNS)]
    for r in history.records:
        lines.append("\t".join([str(r.epoch)] + [f"{v:.6g}" for v in
                                                 (r.train_loss, r.train_acc, r.val_loss, r.val_acc)]
                               + [str(int(r.checkpointed))]))
    return "\n".join(lines) + "\n"


def export_history(history, path):
    """Write the per-epoch table as tab-separated text (header + one row per epoch)."""
    if not history.records:
        raise ValueError("history is empty")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_history(history))


def read_history(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != HISTORY_COLUMNS:
            raise ValueError(f"{path}: unexpected history header {header}")
        records = []
        for line in fh:
            if not line.strip():
                continue
            f = line.rstrip("\n").split("\t")
            records.append(EpochRecord(int(f[0]), float(f[1]), float(f[2]), float(f[3]), float(f[4]),
                                       f[5] == "1"))
    return History(records)
