"""Pretrain a small host on neutral answers, then train an anger IRM against it.

The budget here is small (a few hundred pairs, a handful of epochs) so the
script finishes in about a minute; the acceptance suite runs the full
default configuration.
"""

import logging
from dataclasses import replace

from irmlab import analysis
from irmlab.datasets import Style, Tokenizer
from irmlab.experiment import ExperimentConfig, build_data, run_pretrain, run_train_irm
from irmlab.training import TrainConfig, mean_cross_entropy, qa_sequences

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = ExperimentConfig(
    n_pairs=400, styles=["NEUTRAL", "ANGER"],
    host_train=TrainConfig(lr0=3e-3, max_epochs=6, seed=0),
    irm_train=TrainConfig(lr0=1e-3, max_epochs=4),
)
tok = Tokenizer.default(cfg.model.vocab_size)
data = build_data(cfg, tok)
host, host_report = run_pretrain(cfg, tok, data["NEUTRAL"])
print(f"host: best validation CE {host_report.best_val_ce:.3f} at epoch {host_report.best_epoch}")

net, report = run_train_irm(cfg, host, tok, data["ANGER"], "ANGER", 42)
print(f"IRM: host hash unchanged: {report.host_hash_before == report.host_hash_after}")

val = qa_sequences(data["ANGER"].val, tok.bos_id, tok.eos_id)
print(f"anger validation CE: base {mean_cross_entropy(host, val, tok.pad_id):.3f}, "
      f"injected {mean_cross_entropy(host, val, tok.pad_id, net):.3f}")

for pair in data["NEUTRAL"].test[:3]:
    prompt = [tok.bos_id, *pair.question]
    print("Q:", tok.decode(pair.question))
    print("  base    :", tok.decode(host.generate(prompt, 20)[0][len(prompt):]))
    print("  injected:", tok.decode(host.generate(prompt, 20, net)[0][len(prompt):]))

prompts = [[tok.bos_id, *p.question] for p in data["NEUTRAL"].test[:20]]
print("anger marker rate, base vs injected:",
      analysis.generation_marker_rate(host, prompts, 20, Style.ANGER, tok),
      analysis.generation_marker_rate(host, prompts, 20, Style.ANGER, tok, net))
