"""Toy Llama-style decoder with per-block injection points.

Two forward paths share the same sublayer functions:

* :meth:`HostModel.logits_batch` runs whole padded batches in parallel and
  records an autodiff graph; training and cross-entropy evaluation use it.
* :meth:`HostModel.forward` / :meth:`HostModel.generate` process one token
  per forward pass against a KV cache and capture a :class:`ForwardTrace`.
  Each pass touches only its prefix, so results for a prefix are bitwise
  independent of anything appended later.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Iterator, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

if TYPE_CHECKING:
    from .irm import IrmNet


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    d_ff: int = 172
    vocab_size: int = 512
    max_seq: int = 64
    rope_theta: float = 10000.0
    rmsnorm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_head % 2:
            raise ConfigError(f"head dimension {self.d_head} must be even for rotary positions")
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


@dataclass(frozen=True)
class InjectionPlan:
    """Which blocks receive an injected row, in row order."""

    block_indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.block_indices)
        object.__setattr__(self, "block_indices", idx)
        if not idx:
            raise ConfigError("injection plan is empty")
        if any(b <= a for a, b in zip(idx, idx[1:])) or idx[0] < 0:
            raise ConfigError(f"plan indices must be strictly increasing and >= 0: {idx}")

    @classmethod
    def all_blocks(cls, n_layers: int) -> InjectionPlan:
        return cls(tuple(range(n_layers)))

    def validate(self, n_layers: int) -> None:
        if self.block_indices[-1] >= n_layers:
            raise ConfigError(f"plan {self.block_indices} exceeds {n_layers} blocks")

    def row_of(self, block: int) -> int | None:
        try:
            return self.block_indices.index(block)
        except ValueError:
            return None

    def __len__(self) -> int:
        return len(self.block_indices)


@dataclass
class Block:
    attn_norm_gain: Tensor
    ffn_norm_gain: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    w3: Tensor
    w2: Tensor

    NAMES = ("attn_norm_gain", "ffn_norm_gain", "wq", "wk", "wv", "wo", "w1", "w3", "w2")

    def params(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.NAMES:
            yield name, getattr(self, name)


@dataclass
class StepRecord:
    """Everything captured during one token's forward pass."""

    step: int
    token: int
    post_attention: np.ndarray  # (n_layers, d_model), attention output before injection
    injection: np.ndarray | None  # (|plan|, d_model), the IRM output for this step
    final_residual: np.ndarray  # (d_model,), residual stream before the final norm


@dataclass
class ForwardTrace:
    steps: list[StepRecord] = field(default_factory=list)
    plan: InjectionPlan | None = None
    prompt_len: int = 0

    def __len__(self) -> int:
        return len(self.steps)

    def injections(self) -> np.ndarray:
        """Stacked IRM outputs, shape (steps, |plan|, d_model)."""
        if not self.steps or self.steps[0].injection is None:
            raise ValueError("trace has no injection matrices")
        return np.stack([s.injection for s in self.steps])

    def post_attention(self) -> np.ndarray:
        return np.stack([s.post_attention for s in self.steps])


class _KVCache:
    def __init__(self, n_layers: int):
        self.k: list[np.ndarray | None] = [None] * n_layers
        self.v: list[np.ndarray | None] = [None] * n_layers

    def extend(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.k[layer] is None:
            self.k[layer], self.v[layer] = k, v
        else:
            self.k[layer] = np.concatenate([self.k[layer], k], axis=-2)
            self.v[layer] = np.concatenate([self.v[layer], v], axis=-2)
        return self.k[layer], self.v[layer]

    @property
    def length(self) -> int:
        return 0 if self.k[0] is None else self.k[0].shape[-2]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, t, d = x.shape
    return nx.transpose(nx.reshape(x, (B, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, t, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (B, t, H * dh))


def attention_sublayer(
    x: Tensor,
    block: Block,
    cfg: ModelConfig,
    positions: Sequence[int],
    cache: _KVCache | None = None,
    layer: int = 0,
    causal: bool = True,
) -> Tensor:
    """Pre-norm multi-head attention output for ``x`` of shape (B, t, d_model).

    Returned before the residual add. With ``cache`` the new keys/values are
    appended and every query attends to the full cached prefix.
    """
    if positions[-1] >= cfg.max_seq:
        raise ConfigError(f"sequence position {positions[-1]} exceeds max_seq={cfg.max_seq}")
    h = nx.rmsnorm(x, block.attn_norm_gain, cfg.rmsnorm_eps)
    q = nx.rope_apply(_split_heads(nx.linear(h, block.wq), cfg.n_heads), positions, cfg.rope_theta)
    k = nx.rope_apply(_split_heads(nx.linear(h, block.wk), cfg.n_heads), positions, cfg.rope_theta)
    v = _split_heads(nx.linear(h, block.wv), cfg.n_heads)
    mask = None
    if cache is not None:
        kd, vd = cache.extend(layer, k.data, v.data)
        k, v = Tensor(kd), Tensor(vd)
    elif causal:
        t = x.shape[1]
        mask = np.tril(np.ones((t, t), dtype=bool))
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(cfg.d_head))
    att = nx.softmax_rows(scores, mask)
    return nx.linear(_merge_heads(nx.matmul(att, v)), block.wo)


def ffn_sublayer(x: Tensor, block: Block, cfg: ModelConfig) -> Tensor:
    h = nx.rmsnorm(x, block.ffn_norm_gain, cfg.rmsnorm_eps)
    return nx.swiglu_ffn(h, block.w1, block.w3, block.w2)


def finish_block(x: Tensor, attn: Tensor, block: Block, cfg: ModelConfig,
                 injected: Tensor | None = None) -> Tensor:
    """Residual adds around an already computed attention output."""
    if injected is not None:
        attn = nx.add(attn, injected)
    x = nx.add(x, attn)
    return nx.add(x, ffn_sublayer(x, block, cfg))


def block_forward(x: Tensor, block: Block, cfg: ModelConfig, positions: Sequence[int],
                  injected: Tensor | None = None, cache: _KVCache | None = None,
                  layer: int = 0) -> Tensor:
    """One transformer block; ``injected`` (same shape as ``x``) is added to
    the attention output before the residual add."""
    attn = attention_sublayer(x, block, cfg, positions, cache, layer)
    return finish_block(x, attn, block, cfg, injected)


class HostModel:
    def __init__(self, config: ModelConfig, token_embedding: Tensor, blocks: list[Block],
                 final_norm_gain: Tensor, lm_head: Tensor, eos_id: int | None = None):
        if len(blocks) != config.n_layers:
            raise ConfigError(f"{len(blocks)} blocks for n_layers={config.n_layers}")
        self.config = config
        self.token_embedding = token_embedding
        self.blocks = blocks
        self.final_norm_gain = final_norm_gain
        self.lm_head = lm_head
        self.eos_id = eos_id

    @classmethod
    def init(cls, config: ModelConfig, seed: int, eos_id: int | None = None) -> HostModel:
        rng = np.random.Generator(np.random.Philox(seed))
        d, f = config.d_model, config.d_ff
        resid_scale = 1.0 / np.sqrt(2 * config.n_layers)

        def uniform(out_dim, in_dim, s=1.0):
            bound = s / np.sqrt(in_dim)
            return Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)))

        emb = Tensor(rng.normal(0.0, 1.0, size=(config.vocab_size, d)))
        blocks = []
        for _ in range(config.n_layers):
            blocks.append(Block(
                attn_norm_gain=Tensor(np.ones(d)),
                ffn_norm_gain=Tensor(np.ones(d)),
                wq=uniform(d, d), wk=uniform(d, d), wv=uniform(d, d),
                wo=uniform(d, d, resid_scale),
                w1=uniform(f, d), w3=uniform(f, d),
                w2=uniform(d, f, resid_scale),
            ))
        lm_head = uniform(config.vocab_size, d)
        return cls(config, emb, blocks, Tensor(np.ones(d)), lm_head, eos_id)

    # ------------------------------------------------------------ parameters

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "token_embedding", self.token_embedding
        for i, block in enumerate(self.blocks):
            for name, p in block.params():
                yield f"blocks.{i}.{name}", p
        yield "final_norm_gain", self.final_norm_gain
        yield "lm_head", self.lm_head

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def weight_hash(self) -> str:
        """SHA-256 over every parameter (name, shape and float64 bytes)."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(repr(p.shape).encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> HostModel:
        clone = HostModel.__new__(HostModel)
        clone.config, clone.eos_id = self.config, self.eos_id
        clone.token_embedding = Tensor(self.token_embedding.data)
        clone.blocks = [Block(**{n: Tensor(p.data) for n, p in b.params()}) for b in self.blocks]
        clone.final_norm_gain = Tensor(self.final_norm_gain.data)
        clone.lm_head = Tensor(self.lm_head.data)
        return clone

    # ------------------------------------------------------------ batched path

    def logits_batch(self, tokens: np.ndarray, irm: IrmNet | None = None) -> Tensor:
        """Logits (B, t, vocab) for a padded integer batch (B, t).

        Each position's block-0 attention output feeds the IRM, and the
        resulting rows are injected at that same position.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ValueError(f"expected (batch, seq) tokens, got shape {tokens.shape}")
        cfg = self.config
        positions = list(range(tokens.shape[1]))
        x = nx.embedding(self.token_embedding, tokens)
        rows = None
        for j, block in enumerate(self.blocks):
            attn = attention_sublayer(x, block, cfg, positions)
            if j == 0 and irm is not None:
                irm.plan.validate(cfg.n_layers)
                rows = irm.apply(attn.detach())  # (B, t, |plan|, d)
            injected = None
            if rows is not None:
                r = irm.plan.row_of(j)
                if r is not None:
                    injected = nx.select(rows, r, axis=2)
            x = finish_block(x, attn, block, cfg, injected)
        h = nx.rmsnorm(x, self.final_norm_gain, cfg.rmsnorm_eps)
        return nx.linear(h, self.lm_head)

    # ------------------------------------------------------------ incremental path

    def _check_tokens(self, tokens: Sequence[int]) -> None:
        for t in tokens:
            if not 0 <= int(t) < self.config.vocab_size:
                raise ValueError(f"unknown token id {t} (vocab_size={self.config.vocab_size})")

    def _step(self, token: int, pos: int, cache: _KVCache, irm: IrmNet | None,
              perturb: tuple[int, float] | None = None) -> tuple[np.ndarray, StepRecord]:
        cfg = self.config
        x = nx.embedding(self.token_embedding, np.array([[token]]))
        post_attn = np.empty((cfg.n_layers, cfg.d_model))
        matrix = None
        for j, block in enumerate(self.blocks):
            attn = attention_sublayer(x, block, cfg, [pos], cache, j)
            post_attn[j] = attn.data[0, 0]
            if j == 0:
                if perturb is not None:
                    delta_vec = np.zeros((1, 1, cfg.d_model))
                    delta_vec[0, 0, perturb[0]] = perturb[1]
                    attn = nx.add(attn, Tensor(delta_vec))
                if irm is not None:
                    matrix = irm.forward(post_attn[0])
            injected = None
            if matrix is not None:
                r = irm.plan.row_of(j)
                if r is not None:
                    injected = Tensor(matrix[r].reshape(1, 1, -1))
            x = finish_block(x, attn, block, cfg, injected)
        resid = x.data[0, 0].copy()
        h = nx.rmsnorm(x, self.final_norm_gain, cfg.rmsnorm_eps)
        logits = nx.linear(h, self.lm_head).data[0, 0]
        return logits, StepRecord(pos, int(token), post_attn, matrix, resid)

    def forward(self, tokens: Sequence[int], irm: IrmNet | None = None,
                _perturb: tuple[int, float] | None = None) -> tuple[np.ndarray, ForwardTrace]:
        """Logits (t, vocab) from one forward pass per token, plus the trace."""
        self._check_tokens(tokens)
        if irm is not None:
            irm.plan.validate(self.config.n_layers)
        cache = _KVCache(self.config.n_layers)
        trace = ForwardTrace(plan=irm.plan if irm is not None else None, prompt_len=len(tokens))
        out = np.empty((len(tokens), self.config.vocab_size))
        for pos, tok in enumerate(tokens):
            out[pos], rec = self._step(int(tok), pos, cache, irm, _perturb)
            trace.steps.append(rec)
        return out, trace

    def generate(self, prompt: Sequence[int], n_new: int, irm: IrmNet | None = None
                 ) -> tuple[list[int], ForwardTrace]:
        """Greedy decoding (lowest id wins ties), stopping after EOS.

        Every emitted token, EOS included, gets its own forward pass so the
        trace holds one record per prompt and generated position.
        """
        if n_new < 0:
            raise ValueError("n_new must be >= 0")
        self._check_tokens(prompt)
        if not prompt:
            raise ValueError("prompt must contain at least one token")
        if irm is not None:
            irm.plan.validate(self.config.n_layers)
        n_new = min(n_new, self.config.max_seq - len(prompt))
        cache = _KVCache(self.config.n_layers)
        trace = ForwardTrace(plan=irm.plan if irm is not None else None, prompt_len=len(prompt))
        tokens = [int(t) for t in prompt]
        logits = None
        for pos, tok in enumerate(tokens):
            logits, rec = self._step(tok, pos, cache, irm)
            trace.steps.append(rec)
        for _ in range(n_new):
            nxt = int(np.argmax(logits))
            tokens.append(nxt)
            logits, rec = self._step(nxt, len(tokens) - 1, cache, irm)
            trace.steps.append(rec)
            if self.eos_id is not None and nxt == self.eos_id:
                break
        return tokens, trace


@dataclass
class ContinuityReport:
    index: int
    delta: float
    mode: str
    on_index: float
    off_index_rms: float

    def to_dict(self) -> dict:
        return asdict(self)


def zeroed_copy(model: HostModel) -> HostModel:
    """Copy with Wo of blocks 1..L-1 and every W2 set to zero."""
    clone = model.copy()
    for i, block in enumerate(clone.blocks):
        if i > 0:
            block.wo = Tensor(np.zeros_like(block.wo.data))
        block.w2 = Tensor(np.zeros_like(block.w2.data))
    return clone


def continuity_probe(model: HostModel, prompt: Sequence[int], index: int, delta: float,
                     mode: str = "trained") -> ContinuityReport:
    """Change in the final-position pre-LM-head residual when ``delta * e_index``
    is added to block 0's attention output at every prompt position."""
    if not 0 <= index < model.config.d_model:
        raise ValueError(f"index {index} outside d_model={model.config.d_model}")
    if mode == "zeroed":
        model = zeroed_copy(model)
    elif mode != "trained":
        raise ValueError(f"mode must be 'zeroed' or 'trained', got {mode!r}")
    _, base = model.forward(prompt)
    _, moved = model.forward(prompt, _perturb=(index, float(delta)))
    diff = moved.steps[-1].final_residual - base.steps[-1].final_residual
    off = np.delete(diff, index)
    return ContinuityReport(index, float(delta), mode, float(diff[index]),
                            float(np.sqrt(np.mean(off * off))) if off.size else 0.0)
