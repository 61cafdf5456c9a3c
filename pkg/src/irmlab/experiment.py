"""Experiment configuration, run-directory layout and the end-to-end pipeline.

A run directory always looks like::

    config.json      exact configuration used
    vocab.txt        tokenizer vocabulary, id = line number
    data/            styled corpora (JSON lines)
    checkpoints/     host.ckpt, irm_<style>_s<seed>.ckpt
    traces/          per-prompt generation traces
    reports/         training reports, heatmaps and analysis JSON
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analysis, emit
from .checkpoint import load_host, round_trip_f32, save_host, save_irm, save_trace
from .datasets import CorpusSpec, Style, Tokenizer, base_pairs, generate_corpus, write_corpus
from .host import HostModel, InjectionPlan, ModelConfig, continuity_probe
from .irm import DEFAULT_HIDDEN, IrmConfig, IrmNet, init_irm
from .training import (TrainConfig, TrainReport, pretrain_host, qa_sequences, split_dataset,
                       train_irm)

log = logging.getLogger(__name__)

SEED_ENV = "IRMLAB_SEED"
PROMPT_SEED = 12345


def _default_prompts(n: int = 7) -> list[str]:
    return [q for q, _ in base_pairs(PROMPT_SEED, n)]


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: list[int] | None = None  # None: every block
    irm_hidden: tuple[int, ...] = DEFAULT_HIDDEN
    host_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(lr0=3e-3, max_epochs=12, patience=3, seed=0))
    irm_train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0  # host init, corpus sampling and splits
    n_pairs: int = 2000
    styles: list[str] = field(default_factory=lambda: [s.value for s in Style])
    irm_seeds: list[int] = field(default_factory=lambda: [42, 420])
    prompts: list[str] = field(default_factory=_default_prompts)
    n_new: int = 30
    heatmap_window: int = 10
    histogram_k: list[int] = field(default_factory=lambda: [1000, 2000])
    lmhead_factor: float = 10.0
    continuity_indices: int = 5
    continuity_delta: float = 1.0
    fluency_prompts: int = 50
    host_checkpoint: str | None = None
    host_hash: str | None = None

    @property
    def injection_plan(self) -> InjectionPlan:
        if self.plan is None:
            return InjectionPlan.all_blocks(self.model.n_layers)
        return InjectionPlan(tuple(self.plan))

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "plan": self.plan,
            "irm_hidden": list(self.irm_hidden),
            "host_train": self.host_train.to_dict(),
            "irm_train": self.irm_train.to_dict(),
            "seed": self.seed,
            "n_pairs": self.n_pairs,
            "styles": list(self.styles),
            "irm_seeds": list(self.irm_seeds),
            "prompts": list(self.prompts),
            "n_new": self.n_new,
            "heatmap_window": self.heatmap_window,
            "histogram_k": list(self.histogram_k),
            "lmhead_factor": self.lmhead_factor,
            "continuity_indices": self.continuity_indices,
            "continuity_delta": self.continuity_delta,
            "fluency_prompts": self.fluency_prompts,
            "host_checkpoint": self.host_checkpoint,
            "host_hash": self.host_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        for key in ("host_train", "irm_train"):
            if key in d:
                d[key] = TrainConfig.from_dict(d[key])
        if "irm_hidden" in d:
            d["irm_hidden"] = tuple(d["irm_hidden"])
        cfg = cls(**d)
        for s in cfg.styles:
            Style(s)
        cfg.injection_plan.validate(cfg.model.n_layers)
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.from_dict(emit.read_json(path))

    def save(self, path) -> None:
        emit.write_json(path, self.to_dict())

    def with_seed_override(self, flag_seed: int | None = None) -> ExperimentConfig:
        """Seed precedence: command-line flag, then $IRMLAB_SEED, then the config."""
        if flag_seed is not None:
            return replace(self, seed=int(flag_seed))
        env = os.environ.get(SEED_ENV)
        if env is not None and env.strip():
            return replace(self, seed=int(env))
        return self


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    def create(self) -> RunDir:
        for sub in ("checkpoints", "traces", "reports", "data"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        return self

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def vocab(self) -> Path:
        return self.root / "vocab.txt"

    @property
    def host_ckpt(self) -> Path:
        return self.root / "checkpoints" / "host.ckpt"

    def irm_ckpt(self, style: str, seed: int) -> Path:
        return self.root / "checkpoints" / f"irm_{style.lower()}_s{seed}.ckpt"

    def report(self, name: str) -> Path:
        return self.root / "reports" / name

    def trace(self, name: str) -> Path:
        return self.root / "traces" / name

    def data(self, name: str) -> Path:
        return self.root / "data" / name


# ---------------------------------------------------------------- pieces


@dataclass
class Splits:
    train: list
    val: list
    test: list


def build_data(cfg: ExperimentConfig, tokenizer: Tokenizer) -> dict[str, Splits]:
    """Styled corpora with one shared base and identical split permutation."""
    out = {}
    for style in cfg.styles:
        pairs = generate_corpus(CorpusSpec(Style(style), cfg.seed, cfg.n_pairs), tokenizer)
        out[style] = Splits(*split_dataset(pairs, cfg.irm_train.split, cfg.seed))
    return out


def prompt_ids(tokenizer: Tokenizer, question: str) -> list[int]:
    return [tokenizer.bos_id, *tokenizer.encode(question)]


def run_pretrain(cfg: ExperimentConfig, tokenizer: Tokenizer, neutral: Splits,
                 run: RunDir | None = None) -> tuple[HostModel, TrainReport]:
    host = HostModel.init(cfg.model, cfg.seed, eos_id=tokenizer.eos_id)
    train = qa_sequences(neutral.train, tokenizer.bos_id, tokenizer.eos_id)
    val = qa_sequences(neutral.val, tokenizer.bos_id, tokenizer.eos_id)
    host_cfg = replace(cfg.host_train, seed=cfg.seed)
    host, report = pretrain_host(host, train, val, host_cfg, tokenizer.pad_id)
    round_trip_f32(host)  # the stored checkpoint is float32
    report.host_hash_after = host.weight_hash()
    if run is not None:
        save_host(host, run.host_ckpt)
        report.checkpoint = str(run.host_ckpt.relative_to(run.root))
        report.write(run.report("pretrain_host.jsonl"))
    return host, report


def run_train_irm(cfg: ExperimentConfig, host: HostModel, tokenizer: Tokenizer, splits: Splits,
                  style: str, irm_seed: int, run: RunDir | None = None) -> tuple[IrmNet, TrainReport]:
    host.set_trainable(False)
    irm_cfg = IrmConfig(cfg.model.d_model, cfg.injection_plan, cfg.irm_hidden)
    net = init_irm(irm_cfg, irm_seed)
    train = qa_sequences(splits.train, tokenizer.bos_id, tokenizer.eos_id)
    val = qa_sequences(splits.val, tokenizer.bos_id, tokenizer.eos_id)
    net, report = train_irm(host, net, train, val, replace(cfg.irm_train, seed=irm_seed),
                            tokenizer.pad_id)
    round_trip_f32(net)  # analyses use exactly what the checkpoint holds
    if run is not None:
        path = run.irm_ckpt(style, irm_seed)
        save_irm(net, path)
        report.checkpoint = str(path.relative_to(run.root))
        report.write(run.report(f"train_{style.lower()}_s{irm_seed}.jsonl"))
    return net, report


def analyze_irm(cfg: ExperimentConfig, host: HostModel, net: IrmNet, tokenizer: Tokenizer,
                tag: str, run: RunDir, style: str, neutral_test: list) -> dict:
    """Traces, heatmaps and reports for one trained IRM; returns a summary."""
    plan = net.plan
    summary = {"heatmaps": [], "striation": [], "dominance": []}
    heatmaps = []
    for k_prompt, question in enumerate(cfg.prompts):
        prompt = prompt_ids(tokenizer, question)
        tokens, trace = host.generate(prompt, cfg.n_new, net)
        name = f"{tag}_p{k_prompt}"
        save_trace(run.trace(f"{name}.trace"), tokens, trace,
                   {"style": style, "prompt": question, "text": tokenizer.decode(tokens)})
        steps = trace.injections()
        H = analysis.average_heatmap(steps, len(prompt), cfg.heatmap_window,
                                     plan.block_indices, {"prompt": k_prompt, "run": tag})
        heatmaps.append(H)
        emit.write_heatmap_csv(run.report(f"heatmap_{name}.csv"), H)
        emit.write_heatmap_pgm(run.report(f"heatmap_{name}.pgm"), H)
        stri = analysis.striation_ratio(H) if H.values.shape[0] >= 2 else None
        if stri is not None:
            emit.write_json(run.report(f"striation_{name}.json"), stri.to_dict())
            summary["striation"].append(stri.to_dict()["ratio"])
        dom = analysis.dominant_index(H)
        emit.write_json(run.report(f"dominance_{name}.json"), dom.to_dict())
        summary["dominance"].append({"top_index": dom.top_index, "z_score": dom.z_score})
        for k in cfg.histogram_k:
            hist = analysis.topk_position_histogram(steps, k, len(prompt))
            emit.write_json(run.report(f"histogram_k{k}_{name}.json"), hist.to_dict())
        summary["heatmaps"].append(f"heatmap_{name}.csv")
    mean_H = analysis.HeatmapMatrix(np.mean([h.values for h in heatmaps], axis=0),
                                    list(plan.block_indices), {"run": tag, "prompts": "all"})
    emit.write_heatmap_csv(run.report(f"heatmap_{tag}_mean.csv"), mean_H)
    emit.write_heatmap_pgm(run.report(f"heatmap_{tag}_mean.pgm"), mean_H)
    fl_prompts = [[tokenizer.bos_id, *p.question] for p in neutral_test[:cfg.fluency_prompts]]
    eval_seqs = qa_sequences(neutral_test, tokenizer.bos_id, tokenizer.eos_id)
    fl = analysis.fluency_delta(host, net, eval_seqs, fl_prompts, tokenizer, Style(style), cfg.n_new)
    emit.write_json(run.report(f"fluency_{tag}.json"), fl.to_dict())
    summary["fluency"] = fl.to_dict()
    summary["mean_heatmap"] = mean_H
    return summary


def run_repro(cfg: ExperimentConfig, out_dir) -> dict:
    """Pretrain the host, train one IRM per (style, seed) and emit every report."""
    run = RunDir(out_dir).create()
    cfg.save(run.config)
    tokenizer = Tokenizer.default(cfg.model.vocab_size)
    tokenizer.save(run.vocab)
    data = build_data(cfg, tokenizer)
    for style, splits in data.items():
        write_corpus(run.data(f"{style.lower()}.jsonl"),
                     splits.train + splits.val + splits.test, tokenizer)
    neutral = data.get(Style.NEUTRAL.value) or build_data(
        replace(cfg, styles=[Style.NEUTRAL.value]), tokenizer)[Style.NEUTRAL.value]

    host, host_report = run_pretrain(cfg, tokenizer, neutral, run)
    host.set_trainable(False)
    summary: dict = {"host_hash": host.weight_hash(),
                     "host_best_val_ce": host_report.best_val_ce, "runs": {}}

    lm = analysis.lmhead_outliers(host.lm_head, cfg.lmhead_factor)
    emit.write_json(run.report("lmhead.json"), lm.to_dict(tokenizer))
    summary["lmhead_outliers"] = lm.outliers

    rng = np.random.Generator(np.random.Philox(cfg.seed))
    indices = sorted(int(i) for i in rng.choice(cfg.model.d_model, cfg.continuity_indices,
                                                replace=False))
    probe = prompt_ids(tokenizer, cfg.prompts[0])
    continuity = []
    for n in indices:
        for mode in ("zeroed", "trained"):
            rep = continuity_probe(host, probe, n, cfg.continuity_delta, mode)
            emit.write_json(run.report(f"continuity_{mode}_i{n}.json"), rep.to_dict())
            continuity.append(rep.to_dict())
    summary["continuity"] = continuity

    mean_maps: dict[tuple[str, int], analysis.HeatmapMatrix] = {}
    for style in cfg.styles:
        for seed in cfg.irm_seeds:
            tag = f"{style.lower()}_s{seed}"
            net, report = run_train_irm(cfg, host, tokenizer, data[style], style, seed, run)
            info = analyze_irm(cfg, host, net, tokenizer, tag, run, style, neutral.test)
            mean_maps[(style, seed)] = info.pop("mean_heatmap")
            info.update(best_val_ce=report.best_val_ce, initial_val_ce=report.initial_val_ce,
                        stopped_epoch=report.stopped_epoch,
                        host_hash_unchanged=report.host_hash_before == report.host_hash_after)
            summary["runs"][tag] = info

    contrasts = {}
    for seed in cfg.irm_seeds:
        pairs = [("SADNESS", "ANGER"), ("ANGER", "NEUTRAL"), ("SADNESS", "NEUTRAL")]
        for a, b in pairs:
            if (a, seed) in mean_maps and (b, seed) in mean_maps:
                c = analysis.contrast_heatmaps(mean_maps[(a, seed)], mean_maps[(b, seed)])
                name = f"contrast_{a.lower()}_vs_{b.lower()}_s{seed}.json"
                emit.write_json(run.report(name), c.to_dict())
                contrasts[name] = {"argmin": c.argmin, "argmax": c.argmax}
    summary["contrasts"] = contrasts
    emit.write_json(run.report("summary.json"), summary)
    return summary


def load_run_host(run: RunDir) -> HostModel:
    host = load_host(run.host_ckpt)
    host.set_trainable(False)
    return host
