"""Statistics over IRM outputs: averaged heatmaps, striation, dominant index,
position histograms, LM-head weight outliers, heatmap contrast, fluency."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .datasets import Style, Tokenizer, marker_rate


class AnalysisError(ValueError):
    pass


def _stack(step_matrices) -> np.ndarray:
    arr = np.asarray([getattr(m, "values", m) for m in step_matrices], dtype=np.float64)
    if arr.ndim != 3:
        raise AnalysisError(f"expected a stack of 2-D matrices, got shape {arr.shape}")
    return arr


@dataclass
class HeatmapMatrix:
    values: np.ndarray  # (|plan|, d_model)
    blocks: list[int]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.blocks):
            raise AnalysisError(f"heatmap shape {self.values.shape} does not match {len(self.blocks)} blocks")
        if not np.isfinite(self.values).all():
            raise AnalysisError("heatmap has non-finite entries")


def average_heatmap(step_matrices, prompt_len: int, n_generated: int = 10,
                    blocks: Sequence[int] | None = None, metadata: dict | None = None) -> HeatmapMatrix:
    """Mean injection matrix over the prompt steps and the first ``n_generated`` generated steps."""
    stack = _stack(step_matrices)
    window = stack[:prompt_len + n_generated]
    if len(window) == 0:
        raise AnalysisError("empty averaging window")
    if blocks is None:
        blocks = list(range(stack.shape[1]))
    meta = {"prompt_len": prompt_len, "n_generated": min(n_generated, len(stack) - prompt_len),
            "window_steps": len(window), **(metadata or {})}
    return HeatmapMatrix(window.mean(axis=0), list(blocks), meta)


# ---------------------------------------------------------------- striation


@dataclass
class StriationReport:
    ss_index: float
    ss_layer: float
    ratio: float  # math.inf when only index structure exists
    grand_mean: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"] = "inf" if math.isinf(self.ratio) else self.ratio
        return d


def striation_ratio(H) -> StriationReport:
    """Between-index vs between-layer sums of squares of a layer x index matrix.

    With grand mean mu, index (column) means c and layer (row) means r:
    ss_index = L * sum (c - mu)^2 and ss_layer = d * sum (r - mu)^2.
    """
    H = np.asarray(getattr(H, "values", H), dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 2 or H.shape[1] < 2:
        raise AnalysisError(f"striation needs at least a 2x2 matrix, got {H.shape}")
    L, d = H.shape
    mu = H.mean()
    ss_index = float(L * np.sum((H.mean(axis=0) - mu) ** 2))
    ss_layer = float(d * np.sum((H.mean(axis=1) - mu) ** 2))
    if ss_layer == 0.0:
        ratio = math.inf if ss_index > 0.0 else 1.0
    else:
        ratio = ss_index / ss_layer
    return StriationReport(ss_index, ss_layer, ratio, float(mu))


# ---------------------------------------------------------------- dominance


@dataclass
class DominanceReport:
    scores: list[float]
    top_index: int
    z_score: float

    def to_dict(self) -> dict:
        return asdict(self)


def dominant_index(H) -> DominanceReport:
    """Column score s_n = mean_j |H[j, n]|, its argmax and z-score."""
    H = np.asarray(getattr(H, "values", H), dtype=np.float64)
    if H.size == 0 or H.ndim != 2:
        raise AnalysisError("dominance needs a nonempty 2-D matrix")
    s = np.abs(H).mean(axis=0)
    top = int(np.argmax(s))  # first maximum, so ties go to the lowest index
    std = float(s.std())
    z = 0.0 if std == 0.0 else float((s[top] - s.mean()) / std)
    return DominanceReport([float(v) for v in s], top, z)


# ---------------------------------------------------------------- position histogram


@dataclass
class PositionHistogram:
    k: int
    counts: list[int]
    labels: list[str]  # "p<i>" prompt step, "g<i>" generated step

    def to_dict(self) -> dict:
        return asdict(self)


def topk_position_histogram(step_matrices, k: int, prompt_len: int | None = None) -> PositionHistogram:
    """Bin the ``k`` largest-magnitude entries across all steps by step position.

    Ties in magnitude are resolved by (step, layer, index) order.
    """
    if k < 1:
        raise AnalysisError("k must be >= 1")
    stack = _stack(step_matrices)
    n_steps = stack.shape[0]
    mags = np.abs(stack).reshape(-1)
    # stable sort on -|v| keeps flattened (step, layer, index) order among equals
    order = np.argsort(-mags, kind="stable")[:k]
    per_step = stack.shape[1] * stack.shape[2]
    counts = np.bincount(order // per_step, minlength=n_steps)
    if prompt_len is None:
        prompt_len = n_steps
    labels = [f"p{i}" if i < prompt_len else f"g{i - prompt_len}" for i in range(n_steps)]
    return PositionHistogram(k, [int(c) for c in counts], labels)


# ---------------------------------------------------------------- lm head


@dataclass
class LmHeadReport:
    factor: float
    max_abs: list[float]  # a_n per residual index
    median: float
    outliers: list[int]  # sorted by a_n descending
    top_tokens: dict[int, list[int]]  # outlier index -> 5 token ids with largest |weight|

    def to_dict(self, tokenizer: Tokenizer | None = None) -> dict:
        d = asdict(self)
        d["top_tokens"] = {str(k): v for k, v in self.top_tokens.items()}
        if tokenizer is not None:
            d["top_token_strings"] = {str(k): tokenizer.tokens(v) for k, v in self.top_tokens.items()}
        return d


def lmhead_outliers(lm_head, factor: float = 10.0, n_tokens: int = 5) -> LmHeadReport:
    """Residual indices whose largest outgoing LM-head weight is >= factor x the median."""
    W = np.asarray(getattr(lm_head, "data", lm_head), dtype=np.float64)
    a = np.abs(W).max(axis=0)
    med = float(np.median(a))
    flagged = [n for n in range(a.size) if a[n] >= factor * med]
    flagged.sort(key=lambda n: (-a[n], n))
    top = {}
    for n in flagged:
        col = np.abs(W[:, n])
        top[n] = [int(t) for t in np.argsort(-col, kind="stable")[:n_tokens]]
    return LmHeadReport(factor, [float(v) for v in a], med, flagged, top)


# ---------------------------------------------------------------- contrast


@dataclass
class ContrastReport:
    diff: list[float]
    argmin: int
    argmax: int
    min: float
    max: float

    def to_dict(self) -> dict:
        return asdict(self)


def contrast_heatmaps(Ha, Hb) -> ContrastReport:
    """Per-index difference of column means, ``mean_j Ha[j,n] - mean_j Hb[j,n]``."""
    A = np.asarray(getattr(Ha, "values", Ha), dtype=np.float64)
    B = np.asarray(getattr(Hb, "values", Hb), dtype=np.float64)
    if A.shape != B.shape:
        raise AnalysisError(f"heatmap shapes differ: {A.shape} vs {B.shape}")
    d = A.mean(axis=0) - B.mean(axis=0)
    lo, hi = int(np.argmin(d)), int(np.argmax(d))
    return ContrastReport([float(v) for v in d], lo, hi, float(d[lo]), float(d[hi]))


# ---------------------------------------------------------------- fluency


@dataclass
class FluencyReport:
    base_ce: float
    injected_ce: float
    style: str
    base_marker_rate: float
    injected_marker_rate: float
    n_prompts: int
    n_new: int

    def to_dict(self) -> dict:
        return asdict(self)


def generation_marker_rate(host, prompts, n_new: int, style: Style, tokenizer: Tokenizer,
                           irm=None) -> float:
    """Marker rate pooled over the generated tokens of every prompt.

    With ``n_new == 0`` the prompts themselves are scored.
    """
    pooled: list[str] = []
    for prompt in prompts:
        out, _ = host.generate(list(prompt), n_new, irm)
        new = out[len(prompt):] if n_new > 0 else out
        pooled.extend(tokenizer.tokens(new))
    return marker_rate(pooled, style)


def fluency_delta(host, irm, eval_seqs, prompts, tokenizer: Tokenizer, style: Style,
                  n_new: int = 30) -> FluencyReport:
    """Base vs injected cross-entropy on held-out sequences, plus generation marker rates."""
    from .training import mean_cross_entropy

    if not eval_seqs:
        raise AnalysisError("evaluation corpus is empty")
    style = Style(style)
    base_ce = mean_cross_entropy(host, eval_seqs, tokenizer.pad_id)
    inj_ce = mean_cross_entropy(host, eval_seqs, tokenizer.pad_id, irm)
    return FluencyReport(
        base_ce, inj_ce, style.value,
        generation_marker_rate(host, prompts, n_new, style, tokenizer),
        generation_marker_rate(host, prompts, n_new, style, tokenizer, irm),
        len(prompts), n_new)
