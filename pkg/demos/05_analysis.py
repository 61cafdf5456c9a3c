"""Read a finished run directory and summarize its analysis reports.

    python demos/05_analysis.py RUN_DIR

RUN_DIR is the output of ``irmlab repro`` or ``demos/run_repro.py``.
"""

import sys
from pathlib import Path

import numpy as np

from irmlab import analysis, emit

run = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/repro")
reports = run / "reports"
summary = emit.read_json(reports / "summary.json")
print(f"host {summary['host_hash'][:12]}, best val CE {summary['host_best_val_ce']:.3f}")
print("LM-head outlier indices (factor 10):", summary["lmhead_outliers"] or "none")

for tag, info in summary["runs"].items():
    H = emit.read_heatmap_csv(reports / f"heatmap_{tag}_mean.csv")
    stri = analysis.striation_ratio(H)
    dom = analysis.dominant_index(H)
    fl = info["fluency"]
    print(f"{tag:12s} striation {stri.ratio:8.2f}  dominant index {dom.top_index:3d} (z {dom.z_score:5.2f})  "
          f"CE {fl['base_ce']:.3f}->{fl['injected_ce']:.3f}  "
          f"markers {fl['base_marker_rate']:.3f}->{fl['injected_marker_rate']:.3f}")

for name, c in summary["contrasts"].items():
    print(f"{name}: most negative index {c['argmin']}, most positive {c['argmax']}")

# where in the sequence the largest injections happen
hist = emit.read_json(next(reports.glob("histogram_k1000_anger_s42_p0.json")))
counts = np.array(hist["counts"])
print("top-1000 injections by step (anger, seed 42, prompt 0):")
print("  ", " ".join(f"{l}:{c}" for l, c in zip(hist["labels"], counts) if c))
