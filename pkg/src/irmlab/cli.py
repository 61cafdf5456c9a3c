"""``irmlab`` command line: data generation, training, generation and analysis.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, emit
from .checkpoint import (CheckpointError, load_host, load_irm, load_trace, save_trace)
from .datasets import CorpusSpec, Style, Tokenizer, generate_corpus, read_corpus, write_corpus
from .experiment import (ExperimentConfig, RunDir, build_data, prompt_ids, run_pretrain,
                         run_repro, run_train_irm)
from .host import ConfigError, continuity_probe
from .training import qa_sequences

log = logging.getLogger("irmlab")


class UsageError(Exception):
    """Bad flags, missing inputs or inconsistent configuration (exit 2)."""


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_config(args) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.load(_require(args.config, "config")) if args.config else ExperimentConfig()
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from exc
    return cfg.with_seed_override(args.seed)


def _tokenizer(vocab_path, vocab_size: int) -> Tokenizer:
    if vocab_path:
        return Tokenizer.load(_require(vocab_path, "vocabulary"))
    return Tokenizer.default(vocab_size)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> None:
    try:
        style = Style(args.style.upper())
    except ValueError as exc:
        raise UsageError(f"unknown style {args.style!r}") from exc
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    tok = Tokenizer.default()
    pairs = generate_corpus(CorpusSpec(style, args.seed, args.n), tok)
    write_corpus(args.out, pairs, tok)
    if args.vocab_out:
        tok.save(args.vocab_out)
    log.info("wrote %d %s pairs to %s", len(pairs), style.value, args.out)


def cmd_pretrain_host(args) -> None:
    cfg = _load_config(args)
    run = RunDir(args.out).create()
    cfg.save(run.config)
    tok = Tokenizer.default(cfg.model.vocab_size)
    tok.save(run.vocab)
    neutral = build_data(replace(cfg, styles=[Style.NEUTRAL.value]), tok)[Style.NEUTRAL.value]
    host, report = run_pretrain(cfg, tok, neutral, run)
    print(f"host {report.host_hash_after} best_val_ce {report.best_val_ce:.6f}")


def cmd_train_irm(args) -> None:
    cfg = _load_config(args)
    host_path = args.host or cfg.host_checkpoint
    if not host_path:
        raise UsageError("no host checkpoint: pass --host or set host_checkpoint in the config")
    host = load_host(_require(host_path, "host checkpoint"))
    host.set_trainable(False)
    actual = host.weight_hash()
    if cfg.host_hash is not None and cfg.host_hash != actual:
        raise UsageError(f"host checkpoint hash {actual} differs from config host_hash {cfg.host_hash}")
    cfg = replace(cfg, host_checkpoint=str(host_path), host_hash=actual)
    style = args.style.upper()
    try:
        Style(style)
    except ValueError as exc:
        raise UsageError(f"unknown style {args.style!r}") from exc
    irm_seed = args.irm_seed if args.irm_seed is not None else cfg.irm_seeds[0]
    run = RunDir(args.out).create()
    cfg.save(run.config)
    tok = Tokenizer.default(cfg.model.vocab_size)
    tok.save(run.vocab)
    splits = build_data(replace(cfg, styles=[style]), tok)[style]
    net, report = run_train_irm(cfg, host, tok, splits, style, irm_seed, run)
    print(f"irm {style} seed {irm_seed} best_val_ce {report.best_val_ce:.6f} "
          f"host_hash_before {report.host_hash_before} host_hash_after {report.host_hash_after}")


def cmd_generate(args) -> None:
    host = load_host(_require(args.host, "host checkpoint"))
    host.set_trainable(False)
    irm = None
    if args.irm:
        irm = load_irm(_require(args.irm, "IRM checkpoint"), host)
    tok = _tokenizer(args.vocab, host.config.vocab_size)
    prompt = [tok.bos_id, *tok.encode(args.prompt)] if args.bos else tok.encode(args.prompt)
    if not prompt:
        raise UsageError("empty prompt")
    tokens, trace = host.generate(prompt, args.n_new, irm)
    shown = tokens[1:] if args.bos else tokens
    print(tok.decode(shown))
    if args.trace_out:
        save_trace(args.trace_out, tokens, trace, {"prompt": args.prompt})


def _trace_steps(path):
    meta, t = load_trace(_require(path, "trace"))
    if "injections" not in t:
        raise UsageError(f"{path} was generated without an IRM; it holds no injection matrices")
    return meta, t["injections"]


def cmd_analyze(args) -> None:
    kind = args.kind
    out = Path(args.out)
    if kind == "heatmap":
        meta, steps = _trace_steps(args.inp)
        blocks = list(meta["plan"].block_indices)
        H = analysis.average_heatmap(steps, meta["prompt_len"], args.window, blocks,
                                     {"trace": str(args.inp)})
        emit.write_heatmap_csv(out.with_suffix(".csv"), H)
        emit.write_heatmap_pgm(out.with_suffix(".pgm"), H)
    elif kind == "striation":
        H = emit.read_heatmap_csv(_require(args.inp, "heatmap CSV"))
        emit.write_json(out, analysis.striation_ratio(H).to_dict())
    elif kind == "dominance":
        H = emit.read_heatmap_csv(_require(args.inp, "heatmap CSV"))
        emit.write_json(out, analysis.dominant_index(H).to_dict())
    elif kind == "histogram":
        meta, steps = _trace_steps(args.inp)
        emit.write_json(out, analysis.topk_position_histogram(steps, args.k, meta["prompt_len"]).to_dict())
    elif kind == "lmhead":
        host = load_host(_require(args.inp, "host checkpoint"))
        tok = _tokenizer(args.vocab, host.config.vocab_size)
        emit.write_json(out, analysis.lmhead_outliers(host.lm_head, args.factor).to_dict(tok))
    elif kind == "continuity":
        host = load_host(_require(args.inp, "host checkpoint"))
        tok = _tokenizer(args.vocab, host.config.vocab_size)
        prompt = prompt_ids(tok, args.prompt or ExperimentConfig().prompts[0])
        emit.write_json(out, continuity_probe(host, prompt, args.index, args.delta, args.mode).to_dict())
    elif kind == "contrast":
        if not args.against:
            raise UsageError("contrast needs --against")
        Ha = emit.read_heatmap_csv(_require(args.inp, "heatmap CSV"))
        Hb = emit.read_heatmap_csv(_require(args.against, "heatmap CSV"))
        emit.write_json(out, analysis.contrast_heatmaps(Ha, Hb).to_dict())
    elif kind == "fluency":
        if not args.irm:
            raise UsageError("fluency needs --irm")
        host = load_host(_require(args.inp, "host checkpoint"))
        host.set_trainable(False)
        irm = load_irm(_require(args.irm, "IRM checkpoint"), host)
        tok = _tokenizer(args.vocab, host.config.vocab_size)
        if not args.corpus:
            raise UsageError("fluency needs --corpus (neutral JSON lines)")
        pairs = read_corpus(_require(args.corpus, "corpus"), tok)
        if not pairs:
            raise UsageError("fluency corpus is empty")
        prompts = [[tok.bos_id, *p.question] for p in pairs[:args.n_prompts]]
        seqs = qa_sequences(pairs, tok.bos_id, tok.eos_id)
        rep = analysis.fluency_delta(host, irm, seqs, prompts, tok, Style(args.style.upper()), args.n_new)
        emit.write_json(out, rep.to_dict())
    print(out)


def cmd_repro(args) -> None:
    cfg = _load_config(args)
    summary = run_repro(cfg, args.out)
    print(f"repro complete: {len(summary['runs'])} IRM runs in {args.out}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irmlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a styled QA corpus as JSON lines")
    g.add_argument("--style", required=True, help="neutral | anger | sadness")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--vocab-out")
    g.set_defaults(func=cmd_gen_data)

    for name, func in (("pretrain-host", cmd_pretrain_host), ("train-irm", cmd_train_irm),
                       ("repro", cmd_repro)):
        c = sub.add_parser(name)
        c.add_argument("--config", help="experiment config JSON (defaults if omitted)")
        c.add_argument("--out", required=True, help="run directory")
        c.add_argument("--seed", type=int, help="overrides $IRMLAB_SEED and the config seed")
        if name == "train-irm":
            c.add_argument("--host", help="host checkpoint (else config host_checkpoint)")
            c.add_argument("--style", default="anger")
            c.add_argument("--irm-seed", type=int)
        c.set_defaults(func=func)

    gen = sub.add_parser("generate", help="greedy generation, optionally injected")
    gen.add_argument("--host", required=True)
    gen.add_argument("--irm")
    gen.add_argument("--prompt", required=True)
    gen.add_argument("--n-new", type=int, default=30)
    gen.add_argument("--trace-out")
    gen.add_argument("--vocab")
    gen.add_argument("--no-bos", dest="bos", action="store_false",
                     help="do not prepend the <bos> token")
    gen.set_defaults(func=cmd_generate)

    a = sub.add_parser("analyze", help="analysis reports")
    a.add_argument("kind", choices=["heatmap", "striation", "dominance", "histogram", "lmhead",
                                    "continuity", "contrast", "fluency"])
    a.add_argument("--in", dest="inp", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--against", help="second heatmap CSV for contrast")
    a.add_argument("--window", type=int, default=10, help="generated steps averaged (heatmap)")
    a.add_argument("--k", type=int, default=1000)
    a.add_argument("--factor", type=float, default=10.0)
    a.add_argument("--index", type=int, default=0)
    a.add_argument("--delta", type=float, default=1.0)
    a.add_argument("--mode", choices=["zeroed", "trained"], default="trained")
    a.add_argument("--prompt")
    a.add_argument("--irm")
    a.add_argument("--corpus")
    a.add_argument("--style", default="anger")
    a.add_argument("--n-prompts", type=int, default=50)
    a.add_argument("--n-new", type=int, default=30)
    a.add_argument("--vocab")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"irmlab: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        print(f"irmlab: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
