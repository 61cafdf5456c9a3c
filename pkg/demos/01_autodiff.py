"""Reverse-mode autodiff on float64 arrays, checked against finite differences.

Builds a two-layer toy transformer, takes the gradient of its next-token loss
and compares every parameter gradient with a central-difference estimate.
"""

import numpy as np

from irmlab import numerics as nx
from irmlab.host import HostModel, ModelConfig
from irmlab.numerics import Tensor, gradcheck

rng = np.random.default_rng(0)

# a single op first: d/dx sum(softmax(x) * w)
x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 4)))
err = gradcheck(lambda: nx.sum_all(nx.mul(nx.softmax_rows(x), w)), [x])
print(f"softmax_rows: worst relative error {err:.2e}")

# the whole model
cfg = ModelConfig(d_model=8, n_layers=2, n_heads=2, d_ff=12, vocab_size=11, max_seq=8)
host = HostModel.init(cfg, seed=5)
host.set_trainable(True)
tokens = np.array([[2, 5, 7, 1, 9], [3, 3, 8, 0, 4]])
loss = lambda: nx.cross_entropy(host.logits_batch(tokens[:, :-1]), tokens[:, 1:])
print(f"toy transformer loss {loss().item():.4f}")
print(f"toy transformer: worst relative error over {sum(p.data.size for p in host.parameters())} "
      f"parameters {gradcheck(loss, host.parameters()):.2e}")
