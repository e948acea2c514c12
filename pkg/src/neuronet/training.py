"""Multi-task cross-entropy objective, Adam and the queue-fed training loop."""
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .errors import ConfigurationError, DataError, NumericError, UsageError
from .graph import forward
from .pipeline import SubjectQueue
from .tensor import Tape, Tensor, apply_op, as_tensor, backward

log = logging.getLogger(__name__)


def cross_entropy(logits, labels):
    """Voxel-mean categorical cross-entropy of [C, D, H, W] logits.

    Uses the log-sum-exp form; ``labels`` is an integer [D, H, W] array.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    c = logits.shape[0]
    if labels.shape != logits.shape[1:]:
        raise DataError(f"labels shape {labels.shape} != logits spatial shape {logits.shape[1:]}")
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"label {labels[where]} at voxel {where} outside [0, {c})")
    z = logits.data.reshape(c, -1)
    flat = labels.reshape(-1).astype(np.intp)
    n = flat.size
    zmax = z.max(axis=0)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=0))
    picked = shifted[flat, np.arange(n)]
    loss = np.asarray((lse - picked).mean(), dtype=logits.dtype)

    def bw(g, needs):
        p = np.exp(shifted - lse)
        p[flat, np.arange(n)] -= 1.0
        return ((p * (g / n)).reshape(logits.shape),)

    return apply_op("cross_entropy", (logits,), loss, bw)


@dataclass
class LossWeights:
    lambdas: list

    @classmethod
    def uniform(cls, k):
        return cls([1.0 / k] * k)

    def __post_init__(self):
        self.lambdas = [float(v) for v in self.lambdas]
        if any(v < 0 or not math.isfinite(v) for v in self.lambdas):
            raise ConfigurationError("loss weights must be finite and non-negative")


def total_loss(losses, weights):
    """Weighted sum of per-decoder losses; uniform 1/k weights give their mean."""
    lambdas = weights.lambdas if isinstance(weights, LossWeights) else list(weights)
    if len(losses) != len(lambdas):
        raise UsageError(f"{len(losses)} losses but {len(lambdas)} weights")
    losses = [as_tensor(l) for l in losses]
    acc = np.zeros((), dtype=losses[0].dtype)
    for lam, l in zip(lambdas, losses):
        acc = acc + l.dtype.type(lam) * l.data.reshape(())

    def bw(g, needs):
        return tuple(g * l.dtype.type(lam) for lam, l in zip(lambdas, losses))

    return apply_op("total_loss", tuple(losses), np.asarray(acc), bw)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-5
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(tensors, grads, state):
    """One bias-corrected Adam update.

    ``tensors`` maps name -> Tensor; returns a new mapping of fresh tensors and
    advances ``state`` in place. Every tensor must have a gradient.
    """
    missing = sorted(set(tensors) - set(grads))
    if missing:
        raise UsageError(f"no gradient for {missing[:3]}")
    for name in sorted(tensors):
        if not np.isfinite(grads[name]).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = {}
    for name, p in tensors.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        dt = p.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        new = p.data - dt(state.learning_rate) * m_hat / (np.sqrt(v_hat) + dt(state.epsilon))
        out[name] = Tensor(new, requires_grad=True, name=name, dtype=p.dtype)
    return out


@dataclass
class TrainConfig:
    total_steps: int = 100_000
    crop_size: tuple = (128, 128, 128)
    batch_size: int = 1
    queue_capacity: int = 16
    seed: int = 0
    checkpoint_interval: int = 10_000
    validation_interval: int = 0
    learning_rate: float = 1e-3
    epsilon: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    lambdas: list = None
    queue_timeout: float = 60.0

    def __post_init__(self):
        self.crop_size = tuple(int(c) for c in self.crop_size)
        if len(self.crop_size) != 3:
            raise ConfigurationError("crop_size must have three extents")
        if self.total_steps < 0:
            raise ConfigurationError("total_steps must be >= 0")
        if self.batch_size != 1:
            raise ConfigurationError("only batch_size=1 is supported")
        if self.queue_capacity < 1:
            raise ConfigurationError("queue_capacity must be >= 1")
        if self.checkpoint_interval < 0 or self.validation_interval < 0:
            raise ConfigurationError("intervals must be >= 0")

    def validate_for(self, model_config):
        multiple = model_config.encoder.total_stride
        if any(c % multiple for c in self.crop_size):
            raise ConfigurationError(f"crop_size {self.crop_size} must be a multiple of {multiple}")
        if self.lambdas is not None and len(self.lambdas) != len(model_config.decoders):
            raise ConfigurationError("lambdas must have one entry per decoder")

    def loss_weights(self, k):
        return LossWeights(self.lambdas) if self.lambdas is not None else LossWeights.uniform(k)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["crop_size"] = list(self.crop_size)
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown keys in train config: {', '.join(unknown)}")
        return cls(**data)


@dataclass
class TrainLogRecord:
    step: int
    losses: dict
    total: float
    time: float
    validation: dict = None

    def to_json(self):
        d = {"step": self.step, "losses": self.losses, "total": self.total, "time": round(self.time, 6)}
        if self.validation is not None:
            d["validation"] = self.validation
        return json.dumps(d, sort_keys=True)


def train_step(params, image, labels, weights, state):
    """Forward, loss, backward and Adam update on one sample.

    Returns ``(new_params, per_protocol_losses, total)``.
    """
    with Tape() as tape:
        logits = forward(params, image, mode="train")
        losses = [cross_entropy(lg, lab) for lg, lab in zip(logits, labels)]
        total = total_loss(losses, weights)
    loss_values = [l.item() for l in losses]
    if not all(math.isfinite(v) for v in loss_values) or not math.isfinite(total.item()):
        raise NumericError(f"non-finite loss {loss_values}")
    grads = backward(tape, total, params.tensors)
    new = adam_step(params.tensors, grads, state)
    return params.replace(new), loss_values, total.item()


@dataclass
class TrainResult:
    params: object
    records: list
    checkpoints: list


def train(params, data, config, out_dir=None, validation=None, log_path=None, on_record=None):
    """Run ``config.total_steps`` optimisation steps.

    ``data`` is a started/unstarted :class:`SubjectQueue` or a list of loaded
    subjects (a single-producer queue is built from ``config``). Checkpoints go
    to ``out_dir`` every ``checkpoint_interval`` steps and at the end; the log
    is newline-delimited JSON. On a non-finite loss :class:`NumericError`
    propagates and previously written checkpoints are left untouched.
    """
    model_config = params.config
    config.validate_for(model_config)
    protocols = model_config.protocols
    weights = config.loss_weights(len(protocols))
    state = AdamState(config.learning_rate, config.beta1, config.beta2, config.epsilon)
    if isinstance(data, SubjectQueue):
        source = data
    else:
        source = SubjectQueue(data, protocols, config.crop_size, config.queue_capacity,
                              seed=config.seed, timeout=config.queue_timeout)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    log_fh = open(log_path, "w") if log_path else None
    records, checkpoints = [], []
    start = time.perf_counter()

    def checkpoint(step, final=False):
        if out_dir is None:
            return
        path = os.path.join(out_dir, "final.nnckpt" if final else f"step_{step:07d}.nnckpt")
        save_checkpoint(params, path)
        checkpoints.append(path)

    try:
        source.start()
        for step in range(1, config.total_steps + 1):
            sample = source.next_batch()
            try:
                params, loss_values, total = train_step(params, sample.image, sample.labels, weights, state)
            except NumericError as exc:
                raise NumericError(f"step {step}: {exc}") from exc
            rec = TrainLogRecord(step, dict(zip(protocols, loss_values)), total, time.perf_counter() - start)
            if validation and config.validation_interval and step % config.validation_interval == 0:
                from .evaluation import validation_dice
                rec.validation = validation_dice(params, validation, config.crop_size)
            records.append(rec)
            if log_fh:
                log_fh.write(rec.to_json() + "\n")
                log_fh.flush()
            if on_record:
                on_record(rec)
            if config.checkpoint_interval and step % config.checkpoint_interval == 0 and step != config.total_steps:
                checkpoint(step)
        checkpoint(config.total_steps, final=True)
    finally:
        source.stop()
        if log_fh:
            log_fh.close()
    return TrainResult(params, records, checkpoints)
