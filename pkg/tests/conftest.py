import numpy as np
import pytest

from irmlab.datasets import Tokenizer
from irmlab.host import HostModel, InjectionPlan, ModelConfig
from irmlab.irm import IrmConfig, init_irm

TINY = ModelConfig(d_model=8, n_layers=2, n_heads=2, d_ff=12, vocab_size=16, max_seq=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_host():
    return HostModel.init(TINY, seed=3, eos_id=1)


def random_irm(cfg, seed=0, scale=0.3, hidden=(6, 6, 6, 6)):
    """IRM with a random (nonzero) final layer so injections are visible."""
    net = init_irm(IrmConfig(cfg.d_model, InjectionPlan.all_blocks(cfg.n_layers), hidden), seed)
    r = np.random.default_rng(seed + 99)
    net.weights[-1].data[...] = r.uniform(-scale, scale, net.weights[-1].shape)
    net.biases[-1].data[...] = r.uniform(-scale, scale, net.biases[-1].shape)
    return net


@pytest.fixture
def tokenizer():
    return Tokenizer.default()


class Pretrained:
    """Default-config host pretrained once per session, plus its data."""

    def __init__(self):
        from irmlab.experiment import ExperimentConfig, build_data, run_pretrain

        self.cfg = ExperimentConfig()
        self.tokenizer = Tokenizer.default(self.cfg.model.vocab_size)
        self.data = build_data(self.cfg, self.tokenizer)
        self.host, self.report = run_pretrain(self.cfg, self.tokenizer, self.data["NEUTRAL"])
        self.host.set_trainable(False)


_PRETRAINED = None


@pytest.fixture(scope="session")
def pretrained():
    global _PRETRAINED
    if _PRETRAINED is None:
        _PRETRAINED = Pretrained()
    return _PRETRAINED
