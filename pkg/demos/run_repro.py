"""The full experiment: pretrain, three styles x two seeds of IRMs, every report.

    python demos/run_repro.py [OUT_DIR] [--quick]

Equivalent to ``irmlab repro --out OUT_DIR``. The default configuration
takes on the order of an hour on one CPU core; ``--quick`` shrinks the
corpus and epoch budget to a couple of minutes while producing the same
set of artifacts.
"""

import logging
import sys
import time

from irmlab.experiment import ExperimentConfig, run_repro
from irmlab.training import TrainConfig

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
args = [a for a in sys.argv[1:] if not a.startswith("--")]
out = args[0] if args else "runs/repro"
cfg = ExperimentConfig()
if "--quick" in sys.argv:
    cfg = ExperimentConfig(n_pairs=240, host_train=TrainConfig(lr0=3e-3, max_epochs=3),
                           irm_train=TrainConfig(max_epochs=2), fluency_prompts=12)

t0 = time.time()
summary = run_repro(cfg.with_seed_override(), out)
print(f"done in {time.time() - t0:.0f}s; reports in {out}/reports")
for tag, info in summary["runs"].items():
    fl = info["fluency"]
    print(f"{tag:12s} best val CE {info['best_val_ce']:.3f}  stopped at epoch {info['stopped_epoch']}  "
          f"marker rate {fl['base_marker_rate']:.3f} -> {fl['injected_marker_rate']:.3f}")
