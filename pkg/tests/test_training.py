import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irmlab.host import HostModel
from irmlab.irm import IrmConfig, init_irm
from irmlab.host import InjectionPlan
from irmlab.numerics import NonFiniteError, Tensor
from irmlab.training import (AdamState, DivergenceError, TrainConfig, TrainingError, TrainSequence,
                             adam_step, make_batch, mean_cross_entropy, pretrain_host, qa_sequences,
                             split_dataset, train_irm)

from conftest import TINY, random_irm


def toy_seqs(n=24, seed=0, length=7):
    r = np.random.default_rng(seed)
    return [TrainSequence(tuple(int(t) for t in r.integers(2, TINY.vocab_size, length)), 1)
            for _ in range(n)]


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(patience=0)
        with pytest.raises(ValueError):
            TrainConfig(split=(0.5, 0.2, 0.2))

    def test_round_trip_with_infinite_patience(self):
        cfg = TrainConfig(patience=math.inf, seed=4)
        d = cfg.to_dict()
        assert d["patience"] is None
        assert TrainConfig.from_dict(d) == cfg

    def test_lr_schedule(self):
        cfg = TrainConfig()
        assert [cfg.lr_at(e) for e in range(4)] == [1e-4 * 0.85 ** e for e in range(4)]


class TestSplit:
    def test_sizes(self):
        tr, va, te = split_dataset(list(range(100)))
        assert (len(tr), len(va), len(te)) == (90, 5, 5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(20, 300), st.integers(0, 2**31))
    def test_partition_and_determinism(self, n, seed):
        parts = split_dataset(list(range(n)), seed=seed)
        assert sorted(parts[0] + parts[1] + parts[2]) == list(range(n))
        assert parts == split_dataset(list(range(n)), seed=seed)

    def test_too_few(self):
        with pytest.raises(ValueError):
            split_dataset(list(range(19)))


class TestBatching:
    def test_mask_covers_answer_and_eos_only(self):
        from irmlab.datasets import QAPair, Style
        seqs = qa_sequences([QAPair((5, 6), (7,), Style.NEUTRAL), QAPair((5,), (8, 9, 10), Style.NEUTRAL)],
                            bos_id=0, eos_id=1)
        inputs, targets, mask = make_batch(seqs, pad_id=1)
        assert inputs.tolist() == [[0, 5, 6, 7, 1], [0, 5, 8, 9, 10]]
        assert targets.tolist() == [[5, 6, 7, 1, 1], [5, 8, 9, 10, 1]]
        assert mask.tolist() == [[False, False, True, True, False], [False, True, True, True, True]]

    def test_mean_ce_matches_per_token_oracle(self, tiny_host):
        seqs = toy_seqs(5, length=6) + toy_seqs(3, seed=1, length=4)
        total, count = 0.0, 0
        for s in seqs:
            logits, _ = tiny_host.forward(s.tokens[:-1])
            for i in range(s.loss_from, len(s.tokens) - 1):
                row = logits[i]
                m = row.max()
                total += m + math.log(np.exp(row - m).sum()) - row[s.tokens[i + 1]]
                count += 1
        got = mean_cross_entropy(tiny_host, seqs, pad_id=1, batch_size=3)
        assert got == pytest.approx(total / count, rel=1e-12)


class TestAdam:
    def test_first_step_is_signed_lr(self):
        for g in (0.3, -7.0, 0.02, -150.0):  # |g| >> eps, else eps/|g| exceeds 1e-6
            p = Tensor(np.array([2.0]))
            adam_step([p], [np.array([g])], AdamState.zeros_like([p]), lr=0.01)
            assert abs(p.data[0] - (2.0 - 0.01 * np.sign(g))) <= 0.01 * 1e-6

    def test_zero_gradient_is_no_op(self):
        p = Tensor(np.array([1.5, -2.0]))
        adam_step([p], [np.zeros(2)], AdamState.zeros_like([p]), lr=0.1)
        assert p.data.tolist() == [1.5, -2.0]

    def test_quadratic_against_scalar_oracle(self):
        p = Tensor(np.array([0.0]))
        state = AdamState.zeros_like([p])
        w, m, v, b1, b2, eps, lr = 0.0, 0.0, 0.0, 0.9, 0.999, 1e-8, 0.1
        traj = []
        for t in range(1, 11):
            adam_step([p], [2 * (p.data - 3.0)], state, lr)
            g = 2 * (w - 3.0)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            traj.append(p.data[0])
        assert all(a < b < 3.0 for a, b in zip(traj, traj[1:]))
        assert abs(traj[-1] - w) <= 1e-12

    def test_nan_gradient_names_parameter(self):
        p = Tensor(np.ones(3))
        with pytest.raises(NonFiniteError, match="w_in"):
            adam_step([p], [np.array([0.0, np.nan, 1.0])], AdamState.zeros_like([p]), 0.1,
                      names=["w_in"])
        assert p.data.tolist() == [1.0, 1.0, 1.0]


class TestTrainIrm:
    def test_requires_frozen_host(self, tiny_host):
        tiny_host.set_trainable(True)
        with pytest.raises(TrainingError):
            train_irm(tiny_host, random_irm(TINY), toy_seqs(), toy_seqs(), TrainConfig(), 1)

    def test_zero_epochs(self, tiny_host):
        tiny_host.set_trainable(False)
        net = random_irm(TINY)
        out, rep = train_irm(tiny_host, net, toy_seqs(), toy_seqs(), TrainConfig(max_epochs=0), 1)
        assert rep.epochs == [] and rep.stop_reason == "zero_epochs"
        for a, b in zip(out.parameters(), net.parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_host_hash_and_best_checkpoint(self, tiny_host):
        tiny_host.set_trainable(False)
        before = tiny_host.weight_hash()
        net = init_irm(IrmConfig(8, InjectionPlan((0, 1)), (16, 16, 16, 16)), 5)
        cfg = TrainConfig(lr0=3e-3, max_epochs=6, batch_size=4, patience=2)
        out, rep = train_irm(tiny_host, net, toy_seqs(), toy_seqs(8, seed=9), cfg, 1)
        assert rep.host_hash_before == rep.host_hash_after == before == out.host_hash
        assert rep.lr_sequence() == [cfg.lr_at(e) for e in range(len(rep.epochs))]
        assert mean_cross_entropy(tiny_host, toy_seqs(8, seed=9), 1, out) == pytest.approx(
            rep.best_val_ce, rel=1e-12)
        # the caller's net is left untouched
        assert not net.weights[-1].data.any()

    def test_deterministic(self, tiny_host):
        tiny_host.set_trainable(False)
        cfg = TrainConfig(lr0=1e-3, max_epochs=2, batch_size=5)
        net = random_irm(TINY)
        a, ra = train_irm(tiny_host, net, toy_seqs(), toy_seqs(6, 2), cfg, 1)
        b, rb = train_irm(tiny_host, net, toy_seqs(), toy_seqs(6, 2), cfg, 1)
        assert ra.to_jsonl() == rb.to_jsonl()
        for x, y in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(x.data, y.data)

    def test_report_jsonl_validates(self, tiny_host, tmp_path):
        from irmlab.emit import validate_train_report
        tiny_host.set_trainable(False)
        _, rep = train_irm(tiny_host, random_irm(TINY), toy_seqs(), toy_seqs(6, 2),
                           TrainConfig(max_epochs=2), 1)
        rep.write(tmp_path / "r.jsonl")
        recs = validate_train_report(tmp_path / "r.jsonl")
        assert len(recs) == 3


class TestPretrainHost:
    def test_divergence_aborts(self):
        host = HostModel.init(TINY, 0)
        cfg = TrainConfig(lr0=5.0, lr_gamma=1.0, max_epochs=10, batch_size=2, patience=math.inf)
        with pytest.raises((DivergenceError, NonFiniteError)):
            pretrain_host(host, toy_seqs(), toy_seqs(6, 3), cfg, 1)

    def test_deterministic_and_input_untouched(self):
        host = HostModel.init(TINY, 0)
        h0 = host.weight_hash()
        cfg = TrainConfig(lr0=1e-2, max_epochs=2, batch_size=6)
        a, _ = pretrain_host(host, toy_seqs(), toy_seqs(6, 3), cfg, 1)
        b, _ = pretrain_host(host, toy_seqs(), toy_seqs(6, 3), cfg, 1)
        assert a.weight_hash() == b.weight_hash() != h0 == host.weight_hash()
        assert a.frozen


@pytest.mark.slow
class TestPretrainedDefaultHost:
    def test_better_than_uniform(self, pretrained):
        assert pretrained.report.best_val_ce < math.log(pretrained.cfg.model.vocab_size)

    def test_val_ce_falls_over_first_three_epochs(self, pretrained):
        ces = [pretrained.report.initial_val_ce] + [e.val_ce for e in pretrained.report.epochs[:3]]
        assert all(b < a for a, b in zip(ces, ces[1:]))

    def test_overfit_eight_examples(self, pretrained):
        tok = pretrained.tokenizer
        seqs = qa_sequences(pretrained.data["ANGER"].train[:8], tok.bos_id, tok.eos_id)
        net = init_irm(IrmConfig(64, pretrained.cfg.injection_plan, pretrained.cfg.irm_hidden), 42)
        cfg = TrainConfig(lr0=3e-3, lr_gamma=1.0, batch_size=8, max_epochs=200, patience=math.inf)
        _, rep = train_irm(pretrained.host, net, seqs, seqs, cfg, tok.pad_id)
        assert rep.epochs[-1].train_ce < 0.1 * rep.initial_val_ce
