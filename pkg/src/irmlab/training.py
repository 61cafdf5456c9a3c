"""Adam, per-epoch exponential decay, early stopping, host pretraining and IRM training."""

from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .host import HostModel
from .irm import IrmNet
from .numerics import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    lr_gamma: float = 0.85
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 50
    patience: float = 3  # math.inf disables early stopping
    seed: int = 0
    split: tuple[float, float, float] = (0.90, 0.05, 0.05)

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(s) for s in self.split))
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split must be three fractions summing to 1, got {self.split}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.lr_gamma ** epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        if math.isinf(self.patience):
            d["patience"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if d.get("patience", 3) is None:
            d["patience"] = math.inf
        if "split" in d:
            d["split"] = tuple(d["split"])
        return cls(**d)


# ---------------------------------------------------------------- data


def split_dataset(examples: Sequence, split=(0.90, 0.05, 0.05), seed: int = 0):
    """Seeded shuffle, then contiguous train/val/test slices."""
    n = len(examples)
    if n < 20:
        raise ValueError(f"need at least 20 examples to split, got {n}")
    order = np.random.Generator(np.random.Philox(seed)).permutation(n)
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    shuffled = [examples[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


@dataclass
class TrainSequence:
    """One training sequence: token ids plus which next-token targets count."""

    tokens: tuple[int, ...]
    loss_from: int  # first target index (into tokens[1:]) that contributes


def qa_sequences(pairs, bos_id: int, eos_id: int) -> list[TrainSequence]:
    """``<bos> question answer <eos>``; only answer and EOS targets carry loss."""
    return [TrainSequence((bos_id, *p.question, *p.answer, eos_id), len(p.question))
            for p in pairs]


def text_sequences(chunks) -> list[TrainSequence]:
    return [TrainSequence(tuple(c), 0) for c in chunks]


def make_batch(seqs: Sequence[TrainSequence], pad_id: int):
    """Inputs (B, t), targets (B, t) and loss mask (B, t); pads are masked out."""
    t = max(len(s.tokens) for s in seqs) - 1
    inputs = np.full((len(seqs), t), pad_id, dtype=np.int64)
    targets = np.full((len(seqs), t), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), t), dtype=bool)
    for b, s in enumerate(seqs):
        n = len(s.tokens) - 1
        inputs[b, :n] = s.tokens[:-1]
        targets[b, :n] = s.tokens[1:]
        mask[b, s.loss_from:n] = True
    return inputs, targets, mask


@contextlib.contextmanager
def frozen(params: Sequence[Tensor]):
    """Temporarily stop graph recording for ``params``."""
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def batched_loss(host: HostModel, batch, irm: IrmNet | None = None) -> Tensor:
    inputs, targets, mask = batch
    return nx.cross_entropy(host.logits_batch(inputs, irm), targets, mask)


def mean_cross_entropy(host: HostModel, seqs: Sequence[TrainSequence], pad_id: int,
                       irm: IrmNet | None = None, batch_size: int = 32) -> float:
    """Token-weighted mean next-token cross-entropy over ``seqs``."""
    if not seqs:
        raise ValueError("no sequences to evaluate")
    total, count = 0.0, 0
    for i in range(0, len(seqs), batch_size):
        batch = make_batch(seqs[i:i + batch_size], pad_id)
        n = int(batch[2].sum())
        total += batched_loss(host, batch, irm).item() * n
        count += n
    return total / count


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              names: Sequence[str] | None = None) -> None:
    """One bias-corrected Adam update, in place."""
    for i, g in enumerate(grads):
        if g is not None and not np.isfinite(g).all():
            label = names[i] if names else f"#{i}"
            bad = int((~np.isfinite(g)).sum())
            raise nx.NonFiniteError(f"gradient of parameter {label} has {bad} non-finite entries "
                                    f"at step {state.step + 1}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise nx.ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- loop


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_ce: float
    val_ce: float


@dataclass
class TrainReport:
    kind: str
    epochs: list[EpochRecord] = field(default_factory=list)
    initial_val_ce: float | None = None
    best_epoch: int | None = None
    best_val_ce: float | None = None
    stopped_epoch: int | None = None
    stop_reason: str = "not_started"
    host_hash_before: str | None = None
    host_hash_after: str | None = None
    checkpoint: str | None = None

    def lr_sequence(self) -> list[float]:
        return [e.lr for e in self.epochs]

    def summary(self) -> dict:
        d = asdict(self)
        del d["epochs"]
        d["record"] = "summary"
        return d

    def to_jsonl(self) -> str:
        lines = [json.dumps({"record": "epoch", **asdict(e)}, sort_keys=True) for e in self.epochs]
        lines.append(json.dumps(self.summary(), sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_jsonl())


def _fit(params: list[Tensor], names: list[str], loss_fn, eval_fn, train: Sequence[TrainSequence],
         val: Sequence[TrainSequence], cfg: TrainConfig, pad_id: int, report: TrainReport):
    """Shared epoch loop. Returns the parameter arrays of the best-validation epoch."""
    best = [p.data.copy() for p in params]
    with frozen(params):
        report.initial_val_ce = eval_fn(val)
    report.best_val_ce = report.initial_val_ce
    report.best_epoch = -1
    report.stop_reason = "max_epochs"
    if cfg.max_epochs == 0:
        report.stop_reason = "zero_epochs"
        return best
    state = AdamState.zeros_like(params)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    stale = 0
    diverged = 0
    for epoch in range(cfg.max_epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            batch = make_batch([train[j] for j in order[i:i + cfg.batch_size]], pad_id)
            for p in params:
                p.grad = None
            loss = loss_fn(batch)
            nx.backward(loss)
            adam_step(params, [p.grad for p in params], state, lr, cfg.adam_beta1,
                      cfg.adam_beta2, cfg.adam_eps, names)
            n = int(batch[2].sum())
            total += loss.item() * n
            count += n
        for p in params:
            p.grad = None
        with frozen(params):
            val_ce = eval_fn(val)
        rec = EpochRecord(epoch, lr, total / count, val_ce)
        report.epochs.append(rec)
        report.stopped_epoch = epoch
        log.info("%s epoch %d lr %.3g train %.4f val %.4f", report.kind, epoch, lr,
                 rec.train_ce, val_ce)
        diverged = diverged + 1 if val_ce > 2.0 * report.initial_val_ce else 0
        if diverged >= 2:
            report.stop_reason = "diverged"
            raise DivergenceError(f"validation CE {val_ce:.4f} exceeded twice the initial "
                                  f"{report.initial_val_ce:.4f} for 2 epochs")
        if val_ce < report.best_val_ce:
            report.best_val_ce, report.best_epoch = val_ce, epoch
            best = [p.data.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                report.stop_reason = "early_stopping"
                break
    return best


def train_irm(host: HostModel, irm: IrmNet, train: Sequence[TrainSequence], val: Sequence[TrainSequence],
              cfg: TrainConfig, pad_id: int) -> tuple[IrmNet, TrainReport]:
    """Fit a copy of ``irm`` against a frozen ``host``; returns the best-validation IRM.

    The host must already be frozen. Its weight hash is taken before and
    after and both are stored in the report.
    """
    if not host.frozen:
        raise TrainingError("host must be frozen (call host.set_trainable(False)) before IRM training")
    report = TrainReport("irm", host_hash_before=host.weight_hash())
    net = irm.copy()
    net.set_trainable(True)
    params = net.parameters()
    names = [n for n, _ in net.named_parameters()]
    best = _fit(params, names,
                lambda b: batched_loss(host, b, net),
                lambda seqs: mean_cross_entropy(host, seqs, pad_id, net),
                train, val, cfg, pad_id, report)
    for p, arr in zip(params, best):
        p.data = arr
    net.set_trainable(False)
    report.host_hash_after = host.weight_hash()
    if report.host_hash_after != report.host_hash_before:
        raise TrainingError("host weights changed during IRM training")
    net.host_hash = report.host_hash_after
    return net, report


def pretrain_host(host: HostModel, train: Sequence[TrainSequence], val: Sequence[TrainSequence],
                  cfg: TrainConfig, pad_id: int) -> tuple[HostModel, TrainReport]:
    """Ordinary next-token training of every host parameter (works on a copy)."""
    model = host.copy()
    model.set_trainable(True)
    report = TrainReport("host")
    params = model.parameters()
    names = [n for n, _ in model.named_parameters()]
    best = _fit(params, names,
                lambda b: batched_loss(model, b),
                lambda seqs: mean_cross_entropy(model, seqs, pad_id),
                train, val, cfg, pad_id, report)
    for p, arr in zip(params, best):
        p.data = arr
    model.set_trainable(False)
    report.host_hash_after = model.weight_hash()
    return model, report
