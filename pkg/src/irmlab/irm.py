"""The injection network: block-0 attention output -> one row per injected block."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import numerics as nx
from .host import ConfigError, InjectionPlan
from .numerics import Tensor

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = (128, 256, 256, 256)


@dataclass(frozen=True)
class IrmConfig:
    input_dim: int
    plan: InjectionPlan
    hidden_dims: tuple[int, ...] = DEFAULT_HIDDEN

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if len(self.hidden_dims) != 4:
            raise ConfigError(f"IRM needs four hidden layers, got {self.hidden_dims}")

    @property
    def output_dim(self) -> int:
        return len(self.plan) * self.input_dim

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "plan": list(self.plan.block_indices),
        }

    @classmethod
    def from_dict(cls, d: dict) -> IrmConfig:
        return cls(d["input_dim"], InjectionPlan(tuple(d["plan"])), tuple(d["hidden_dims"]))


@dataclass
class InjectionMatrix:
    values: np.ndarray  # (|plan|, d_model), rows in plan order
    step: int
    plan: InjectionPlan


@dataclass
class IrmNet:
    config: IrmConfig
    weights: list[Tensor]  # (out, in) each
    biases: list[Tensor]
    host_hash: str | None = field(default=None)

    def __post_init__(self):
        if len(self.weights) != 5 or len(self.biases) != 5:
            raise ConfigError("IRM has exactly five linear layers")
        for (fan_in, fan_out), w, b in zip(self.config.layer_dims, self.weights, self.biases):
            if w.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise ConfigError(f"layer shape {w.shape}/{b.shape} != ({fan_out}, {fan_in})")
        log.info("IRM with %d trainable parameters", self.n_params)

    @property
    def plan(self) -> InjectionPlan:
        return self.config.plan

    @property
    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"layers.{i}.weight", w
            yield f"layers.{i}.bias", b

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def copy(self) -> IrmNet:
        return IrmNet(self.config, [Tensor(w.data) for w in self.weights],
                      [Tensor(b.data) for b in self.biases], self.host_hash)

    def apply(self, a0: Tensor) -> Tensor:
        """Differentiable map (..., d_model) -> (..., |plan|, d_model)."""
        h = a0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = nx.add_bias(nx.linear(h, w), b)
            if i < 4:
                h = nx.relu(h)
        return nx.reshape(h, (*a0.shape[:-1], len(self.plan), self.config.input_dim))

    def forward(self, a0: np.ndarray) -> np.ndarray:
        """Single vector, no graph: returns the (|plan|, d_model) matrix."""
        h = np.asarray(a0, dtype=np.float64)
        if h.shape != (self.config.input_dim,):
            raise ValueError(f"IRM input must have shape ({self.config.input_dim},), got {h.shape}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = w.data @ h + b.data
            if i < 4:
                h = np.maximum(h, 0.0)
        if not np.isfinite(h).all():
            raise nx.NonFiniteError("IRM output is not finite")
        return h.reshape(len(self.plan), self.config.input_dim)


def irm_forward(a0: np.ndarray, net: IrmNet, step: int = 0) -> InjectionMatrix:
    return InjectionMatrix(net.forward(a0), step, net.plan)


def init_irm(config: IrmConfig, seed: int) -> IrmNet:
    """Uniform(+-1/sqrt(fan_in)) hidden weights from a Philox stream, zero biases,
    and an all-zero output layer so the fresh network injects nothing."""
    rng = np.random.Generator(np.random.Philox(seed))
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(config.layer_dims):
        if i == 4:
            w = np.zeros((fan_out, fan_in))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        weights.append(Tensor(w))
        biases.append(Tensor(np.zeros(fan_out)))
    return IrmNet(config, weights, biases)
