"""Where the IRM plugs in, and why a fresh one changes nothing.

The IRM reads block 0's attention output and returns one row per injected
block; each row is added to that block's attention output before the
residual add. Its last layer starts at zero, so a fresh network is inert.
"""

import numpy as np

from irmlab.host import HostModel, InjectionPlan, ModelConfig, continuity_probe
from irmlab.irm import IrmConfig, init_irm

cfg = ModelConfig()
host = HostModel.init(cfg, seed=0, eos_id=1)
plan = InjectionPlan.all_blocks(cfg.n_layers)
net = init_irm(IrmConfig(cfg.d_model, plan), seed=42)

prompt = [0, 17, 33, 120, 7]
base, _ = host.forward(prompt)
injected, trace = host.forward(prompt, net)
print("fresh IRM leaves logits bitwise equal:", np.array_equal(base, injected))
print("injection matrices per step:", trace.injections().shape)

# give the output layer some weight and the generation moves
rng = np.random.default_rng(1)
net.weights[-1].data[...] = rng.normal(0, 20.0, net.weights[-1].shape)
print("base     :", host.generate(prompt, 8)[0][len(prompt):])
print("injected :", host.generate(prompt, 8, net)[0][len(prompt):])

# an injected offset at index n travels down the residual stream
for mode in ("zeroed", "trained"):
    r = continuity_probe(host, prompt, index=5, delta=1.0, mode=mode)
    print(f"continuity ({mode}): on-index {r.on_index:.6f}, off-index RMS {r.off_index_rms:.6f}")
