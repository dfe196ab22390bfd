"""Training loop: SGD with momentum, evaluation, history, checkpoints.

The loop is deterministic end to end: minibatch order is drawn from a
generator seeded by ``(run seed, epoch index)``, evaluation batches are
a fixed size consumed in order, and metric accumulation is sequential,
so a given (model seed, data, config) always produces bit-identical
history rows and checkpoint bytes.

Checkpoint layout (little-endian):

* magic ``b"CMPN"``
* format version, u32
* header length, u64
* UTF-8 JSON header: model config, training config echo, parameter
  names and shapes in order, completed-epoch counter, free-form extras
* one float64 payload per parameter, then one per velocity, header order
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import models as models_mod
from .autodiff import Tape, Tensor, backward
from .data import Dataset
from .exceptions import ConfigError, DataError, FormatError, NumericError, ShapeError
from .layers import cross_entropy
from .models import Model, ModelConfig

CHECKPOINT_MAGIC = b"CMPN"
CHECKPOINT_VERSION = 1
_EVAL_BATCH = 256


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""
    epochs: int = 2000
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True
    eval_every: int = 1
    patience: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        # 0 is allowed so a zero step can be asserted to be an exact no-op.
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.patience is not None and self.patience < 1:
            raise ConfigError(f"patience must be >= 1 when set, got {self.patience}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "seed": self.seed,
            "shuffle": self.shuffle,
            "eval_every": self.eval_every,
            "patience": self.patience,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        try:
            return cls(**dict(d))
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from None


@dataclass
class Metrics:
    """Mean cross-entropy, fraction correct, and the sample count behind them."""
    loss: float
    accuracy: float
    n: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.accuracy <= 1.0:
            raise DataError(f"accuracy must be in [0, 1], got {self.accuracy}")
        if self.loss < 0.0:
            raise DataError(f"loss must be >= 0, got {self.loss}")


@dataclass
class EpochRecord:
    """One history row: epoch number plus its evaluations.

    ``train`` is the post-epoch evaluation over the full training set
    (the number reported as training accuracy); ``running`` aggregates
    the minibatch forward passes made during the epoch; ``test`` is
    present on evaluation epochs.
    """
    epoch: int
    train: Metrics
    running: Metrics
    test: Metrics | None = None


@dataclass
class History:
    """Per-epoch records of one run, in strictly increasing epoch order."""
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ConfigError(
                f"history epochs must increase: {record.epoch} after "
                f"{self.records[-1].epoch}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def last(self) -> EpochRecord:
        if not self.records:
            raise DataError("history is empty")
        return self.records[-1]

    def final_gap(self) -> float:
        """Train minus test accuracy at the last test-evaluated epoch."""
        for rec in reversed(self.records):
            if rec.test is not None:
                return rec.train.accuracy - rec.test.accuracy
        raise DataError("history holds no test evaluations")


@dataclass
class OptimState:
    """Per-parameter momentum velocities plus the completed-epoch counter."""
    velocities: dict[str, np.ndarray]
    epoch: int = 0


def init_optim_state(model: Model) -> OptimState:
    return OptimState(
        velocities={name: np.zeros_like(model.params[name])
                    for name in model.param_order},
        epoch=0)


def sgd_momentum_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
                      state: OptimState, lr: float, momentum: float
                      ) -> tuple[dict[str, np.ndarray], OptimState]:
    """One momentum update: ``v <- momentum*v + g``; ``w <- w - lr*v``.

    Mutates ``params`` and ``state`` in place and returns them.
    """
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(
                f"gradient for {name} has shape {list(g.shape)}, "
                f"parameter has {list(w.shape)}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        v = state.velocities[name]
        v = momentum * v + g
        state.velocities[name] = v
        params[name] = w - lr * v
    return params, state


def _batch_slices(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_epoch(model: Model, train: Dataset, cfg: TrainConfig,
                state: OptimState) -> Metrics:
    """One pass over seeded-shuffled minibatches; the short tail batch is kept.

    Returns running metrics aggregated over the epoch's forward passes
    (before each update), and advances ``state.epoch``.
    """
    n = len(train)
    if n == 0:
        raise DataError("cannot train on an empty dataset")
    images = train.images()
    features = train.features()
    labels = train.labels()
    if cfg.shuffle:
        order = np.random.default_rng((cfg.seed, state.epoch)).permutation(n)
    else:
        order = np.arange(n)

    loss_sum = 0.0
    correct = 0
    for b, idx in enumerate(_batch_slices(n, cfg.batch_size, order)):
        tape = Tape()
        logits, watched = models_mod.tracked_forward(
            model, tape,
            Tensor(np.ascontiguousarray(images[idx]), _own=True),
            Tensor(np.ascontiguousarray(features[idx]), _own=True))
        loss = cross_entropy(logits, labels[idx])
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise NumericError(
                f"loss diverged at epoch {state.epoch}, batch {b}")
        grads_by_node = backward(loss)
        grads = {name: grads_by_node[t.node_id].data for name, t in watched.items()}
        sgd_momentum_step(model.params, grads, state,
                          cfg.learning_rate, cfg.momentum)
        loss_sum += loss_value * len(idx)
        correct += int((np.argmax(logits.data, axis=1) == labels[idx]).sum())
    state.epoch += 1
    return Metrics(loss=loss_sum / n, accuracy=correct / n, n=n)


def evaluate(model: Model, ds: Dataset) -> Metrics:
    """Loss and accuracy over a dataset; parameters untouched."""
    n = len(ds)
    if n == 0:
        raise DataError("cannot evaluate on an empty dataset")
    images = ds.images()
    features = ds.features()
    labels = ds.labels()
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, _EVAL_BATCH):
        stop = min(start + _EVAL_BATCH, n)
        logits = models_mod.forward(
            model,
            Tensor(np.ascontiguousarray(images[start:stop]), _own=True),
            Tensor(np.ascontiguousarray(features[start:stop]), _own=True))
        batch_labels = labels[start:stop]
        loss = cross_entropy(logits, batch_labels)
        loss_sum += loss.item() * (stop - start)
        correct += int((np.argmax(logits.data, axis=1) == batch_labels).sum())
    return Metrics(loss=loss_sum / n, accuracy=correct / n, n=n)


def fit(model: Model, train: Dataset, test: Dataset | None,
        cfg: TrainConfig, state: OptimState | None = None,
        history: History | None = None) -> History:
    """Run ``cfg.epochs`` epochs, evaluating on the cadence of ``eval_every``.

    Test data is only ever evaluated, never trained on.  Pass the
    ``state``/``history`` from a loaded checkpoint to resume: the loop
    continues from ``state.epoch`` and reproduces an uninterrupted run
    bit-exactly.  With ``patience`` set, training stops early once test
    accuracy has failed to improve over that many consecutive
    evaluations.
    """
    state = state if state is not None else init_optim_state(model)
    history = history if history is not None else History()
    best_test_acc = -1.0
    stale_evals = 0
    while state.epoch < cfg.epochs:
        running = train_epoch(model, train, cfg, state)
        epoch = state.epoch  # completed epochs, 1-based row number
        train_eval = evaluate(model, train)
        test_eval = None
        if test is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            test_eval = evaluate(model, test)
        history.append(EpochRecord(epoch=epoch, train=train_eval,
                                   running=running, test=test_eval))
        if cfg.patience is not None and test_eval is not None:
            if test_eval.accuracy > best_test_acc:
                best_test_acc = test_eval.accuracy
                stale_evals = 0
            else:
                stale_evals += 1
                if stale_evals >= cfg.patience:
                    break
    return history


def checkpoint_save(model: Model, opt_state: OptimState, path,
                    train_config: TrainConfig | None = None,
                    extra: Mapping | None = None) -> Path:
    """Write a checkpoint; see the module docstring for the byte layout."""
    header = {
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "params": [{"name": name, "shape": list(model.params[name].shape)}
                   for name in model.param_order],
        "epoch": opt_state.epoch,
        "extra": dict(extra) if extra else {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC,
              struct.pack("<I", CHECKPOINT_VERSION),
              struct.pack("<Q", len(header_bytes)),
              header_bytes]
    for name in model.param_order:
        chunks.append(model.params[name].astype("<f8").tobytes())
    for name in model.param_order:
        chunks.append(opt_state.velocities[name].astype("<f8").tobytes())
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, out)
    return out


def _parse_checkpoint(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header_len = struct.unpack("<Q", blob[8:16])[0]
    if len(blob) < 16 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header: {exc}") from None
    for key in ("model_config", "params", "epoch"):
        if key not in header:
            raise FormatError(f"{path}: checkpoint header missing {key!r}")
    return header, blob[16 + header_len:]


def read_checkpoint_header(path) -> dict:
    """Checkpoint metadata without loading the parameter payload."""
    header, _ = _parse_checkpoint(path)
    return header


def checkpoint_load(path) -> tuple[Model, OptimState]:
    """Rebuild a model and optimizer state bit-exactly from a checkpoint."""
    header, payload = _parse_checkpoint(path)
    config = ModelConfig.from_dict(header["model_config"])
    model = models_mod.build_model(config)
    names = [p["name"] for p in header["params"]]
    shapes = {p["name"]: tuple(p["shape"]) for p in header["params"]}
    if names != model.param_order:
        raise FormatError(f"{path}: checkpoint parameters do not match the "
                          f"model built from its config")
    for name in names:
        if shapes[name] != model.params[name].shape:
            raise FormatError(
                f"{path}: parameter {name} has shape {list(shapes[name])}, "
                f"model expects {list(model.params[name].shape)}")
    total = sum(int(np.prod(shapes[n])) for n in names)
    values = np.frombuffer(payload, dtype="<f8")
    if values.size != 2 * total:
        raise FormatError(
            f"{path}: payload holds {values.size} floats, header implies {2 * total}")
    params: dict[str, np.ndarray] = {}
    velocities: dict[str, np.ndarray] = {}
    offset = 0
    for target in (params, velocities):
        for name in names:
            count = int(np.prod(shapes[name]))
            target[name] = values[offset:offset + count].astype(
                np.float64).reshape(shapes[name])
            offset += count
    model.set_params(params)
    return model, OptimState(velocities=velocities, epoch=int(header["epoch"]))
