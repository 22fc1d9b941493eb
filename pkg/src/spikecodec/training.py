"""Surrogate-gradient training through time (STBP) with SGD + momentum.

Loss is cross-entropy on the time-averaged output K = mean_t O^t.  The
gradient dL/dK = softmax(K) - onehot(y) is spread evenly over the T steps
and pushed back through the head, the blocks and (unless frozen) the encoder.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import Dataset, augment_batch
from .network import Network, decode_mean

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, record):
        super().__init__(f"non-finite loss at epoch {record.epoch} step {record.step}")
        self.record = record


@dataclass
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    schedule: str = "cosine"
    freeze_encoder: bool = False
    flip: bool = False
    crop_pad: int = 0
    eval_batch_size: int = 256
    workers: int = 1

    def __post_init__(self):
        if self.lr0 < 0:
            raise ValueError("lr0 must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossRecord:
    epoch: int
    step: int  # -1 marks an end-of-epoch evaluation row
    loss: float
    acc: float
    lr: float


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits`` [B, n]."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, n = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if b and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logq = z - lse[:, None]
    loss = -logq[np.arange(b), labels].mean()
    grad = np.exp(logq)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_lr(epoch, total_epochs, lr0):
    if total_epochs <= 0:
        return lr0
    if not 0 <= epoch <= total_epochs:
        raise ValueError("epoch must lie in [0, total_epochs]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs))


class SGD:
    """v <- momentum * v + grad + wd * param;  param <- param - lr * v (in place)."""

    def __init__(self, params: dict[str, np.ndarray], momentum=0.9, weight_decay=5e-4, no_decay=()):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, p in self.params.items():
            g = grads[name]
            if self.weight_decay and name not in self.no_decay:
                g = g + self.weight_decay * p
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p -= lr * v


def sgd_step(params, grads, velocity, cfg: TrainConfig, lr: float, no_decay=()):
    """Functional form of one SGD update; mutates ``params`` and ``velocity``."""
    opt = SGD(params, cfg.momentum, cfg.weight_decay, no_decay)
    opt.velocity = velocity
    opt.step(grads, lr)
    return params


def stbp_backward(net: Network, loss_grad_k) -> dict[str, np.ndarray]:
    """Gradients of every parameter given dL/dK [B, n] (K = time-mean output)."""
    steps = net._T
    if steps is None:
        raise RuntimeError("missing forward tape; call net.forward first")
    g_out = np.broadcast_to(np.asarray(loss_grad_k) / steps, (steps,) + np.shape(loss_grad_k))
    net.zero_grad()
    return net.backward(np.ascontiguousarray(g_out))


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cosine_lr(epoch, cfg.epochs, cfg.lr0) if cfg.schedule == "cosine" else cfg.lr0


def predict(net: Network, images, batch_size=256, seed=0, workers=1) -> np.ndarray:
    """Time-averaged logits in eval mode; batches may run on ``workers`` threads."""
    net.set_mode(False)
    starts = list(range(0, len(images), batch_size))
    if not starts:
        return np.zeros((0, net.spec.n_classes))

    def run(start, model):
        return decode_mean(model.forward(images[start : start + batch_size], seed=seed, index_offset=start))

    if workers <= 1 or len(starts) == 1:
        out = np.concatenate([run(s, net) for s in starts])
        net.release()
        return out
    models = [net.clone() for _ in range(workers)]
    with ThreadPoolExecutor(workers) as pool:
        futures = [pool.submit(run, s, models[i % workers]) for i, s in enumerate(starts)]
        # collected in submission order, so the result is independent of scheduling
        return np.concatenate([f.result() for f in futures])


def evaluate(net: Network, dataset: Dataset, batch_size=256, seed=0, workers=1) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    k = predict(net, dataset.images, batch_size, seed, workers)
    return float(np.mean(k.argmax(axis=1) == dataset.labels))


@dataclass
class TrainResult:
    records: list
    best_acc: float | None
    best_state: dict | None
    best_epoch: int | None


def train(net: Network, dataset: Dataset, cfg: TrainConfig, eval_set: Dataset | None = None,
          on_record=None) -> TrainResult:
    """Train ``net`` in place; keep the parameters with the best eval accuracy."""
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    net.freeze_encoder = cfg.freeze_encoder
    opt = SGD(net.named_parameters(), cfg.momentum, cfg.weight_decay, net.no_decay())
    records = []
    best_acc, best_state, best_epoch = None, None, None

    def emit(rec):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            images = dataset.images[idx]
            if cfg.flip or cfg.crop_pad:
                images = augment_batch(images, idx, (cfg.seed, epoch), cfg.flip, cfg.crop_pad)
            net.set_mode(True)
            out = net.forward(images, seed=cfg.seed * 1_000_003 + epoch, index_offset=start)
            k = decode_mean(out)
            loss, gk = cross_entropy(k, dataset.labels[idx])
            acc = float(np.mean(k.argmax(axis=1) == dataset.labels[idx]))
            rec = LossRecord(epoch, step, loss, acc, lr)
            if not math.isfinite(loss):
                emit(rec)
                raise TrainingDiverged(rec)
            grads = stbp_backward(net, gk)
            opt.step(grads, lr)
            emit(rec)
        net.release()
        if eval_set is not None and len(eval_set):
            acc = evaluate(net, eval_set, cfg.eval_batch_size, workers=cfg.workers)
            emit(LossRecord(epoch, -1, float("nan"), acc, lr))
            log.info("epoch %d eval acc %.4f", epoch, acc)
            if best_acc is None or acc > best_acc:
                best_acc, best_state, best_epoch = acc, net.state_dict(), epoch
    net.set_mode(False)
    return TrainResult(records, best_acc, best_state, best_epoch)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "step", "loss", "acc", "lr"])
    for r in records:
        w.writerow([r.epoch, r.step, repr(float(r.loss)), repr(float(r.acc)), repr(float(r.lr))])
    return buf.getvalue()


def record_dicts(records):
    return [asdict(r) for r in records]
