"""Mini-batch training shared by AnchorNet-T and the downstream text CNN."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import SGD, Tape
from .corpus import Corpus
from .errors import InvalidArgument, NumericalError, TrainingDiverged
from .model import AnchorNetT, ModelConfig, accuracy_by_branch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    epochs: int = 30
    batch_size: int = 50
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    seed: int = 0
    # stop early once every branch reaches this validation accuracy
    target_accuracy: float | None = None


@dataclass
class TrainResult:
    model: object
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best(self) -> dict:
        return self.log[self.best_epoch - 1] if self.log else {}


def train(model, corpus: Corpus, schedule: Schedule,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """SGD over the train split; keeps the parameters of the best validation epoch.

    Any model with ``config.seq_len``, ``parameters()``, ``loss(tokens, labels)``
    and ``branch_probs(tokens)`` works.
    """
    seq_len = model.config.seq_len
    x_train, y_train = corpus.encode("train", seq_len)
    x_val, y_val = corpus.encode("val", seq_len)
    if len(y_train) == 0:
        raise InvalidArgument("corpus has no training documents")
    params = model.parameters()
    opt = SGD(params, schedule.learning_rate, schedule.momentum, schedule.weight_decay)
    rng = np.random.default_rng(schedule.seed)
    result = TrainResult(model)
    best_score, best_values = -np.inf, None

    for epoch in range(1, schedule.epochs + 1):
        order = rng.permutation(len(y_train))
        losses = []
        for start in range(0, len(order), schedule.batch_size):
            batch = order[start:start + schedule.batch_size]
            opt.zero_grad()
            try:
                with Tape() as tape:
                    loss = model.loss(x_train[batch], y_train[batch])
                tape.backward(loss)
            except NumericalError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from None
            opt.step()
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        if not np.isfinite(train_loss):
            raise TrainingDiverged(f"epoch {epoch}: non-finite training loss")
        val_acc = accuracy_by_branch(model, x_val, y_val) if len(y_val) else []
        record = {"epoch": epoch, "train_loss": train_loss, "val_accuracy": [float(a) for a in val_acc]}
        result.log.append(record)
        log.info("epoch %d loss %.4f val %s", epoch, train_loss, val_acc)
        if on_epoch:
            on_epoch(record)
        score = float(np.mean(val_acc)) if val_acc else -train_loss
        # ties go to the later epoch: accuracy saturates long before the maps sharpen
        if score >= best_score:
            best_score, result.best_epoch = score, epoch
            best_values = {id(p): p.data.copy() for p in params}
        if schedule.target_accuracy is not None and val_acc and min(val_acc) >= schedule.target_accuracy:
            break

    for p in params:
        p.data = best_values[id(p)]
    return result


def train_anchornet(corpus: Corpus, config: ModelConfig, schedule: Schedule,
                    on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    if config.vocab_size != len(corpus.vocab):
        raise InvalidArgument(f"config vocab_size {config.vocab_size} != corpus vocab {len(corpus.vocab)}")
    model = AnchorNetT(config, seed=schedule.seed)
    return train(model, corpus, schedule, on_epoch)
