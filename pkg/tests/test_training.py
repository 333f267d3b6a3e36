import math

import numpy as np
import pytest

from surginstruct import autodiff as ad
from surginstruct.autodiff import Tensor
from surginstruct.metrics import CiderD
from surginstruct.pipeline import build_model, synthetic_corpus, train_config
from surginstruct.text import BOS, EOS, PAD
from surginstruct.training import (Adam, CaptionData, TrainConfig, Trainer, adam_step, clip_grad_norm,
                                   cider_reward, lr_schedule, scst_step, scst_surrogate, train_scst, train_xe,
                                   xe_loss)

from helpers import model_gradcheck, tiny_run_config, tiny_transformer


class TestSchedule:
    cfg = TrainConfig(peak_lr_xe=3e-4, warmup_steps=20000)

    def test_peak_at_warmup(self):
        assert lr_schedule(20000, self.cfg) == pytest.approx(3e-4, rel=1e-15)

    def test_half_warmup(self):
        assert lr_schedule(10000, self.cfg) == pytest.approx(1.5e-4, rel=1e-15)

    def test_inverse_sqrt(self):
        assert lr_schedule(80000, self.cfg) == pytest.approx(1.5e-4, rel=1e-15)

    def test_step_zero_rejected(self):
        with pytest.raises(ValueError):
            lr_schedule(0, self.cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(warmup_steps=0)
        with pytest.raises(ValueError):
            TrainConfig(phase="rl")


class TestAdam:
    def test_zero_grads_leave_params(self):
        x = Tensor(np.arange(3.0), requires_grad=True)
        opt = Adam({"x": x})
        x.grad = np.zeros(3)
        adam_step({"x": x}, opt, 0.1)
        np.testing.assert_array_equal(x.data, np.arange(3.0))

    def test_first_step_is_minus_lr(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        opt = Adam({"x": x})
        x.grad = np.array([1.0])
        opt.step(0.01)
        assert x.data[0] - 2.0 == pytest.approx(-0.01, rel=1e-7)

    def test_quadratic_convergence(self):
        x = Tensor(np.array([5.0]), requires_grad=True)
        opt = Adam({"x": x})
        for _ in range(10_000):
            x.grad = 2 * (x.data - 3.0)
            opt.step(0.01)
        assert abs(x.data[0] - 3.0) <= 1e-6

    def test_nan_gradient_aborts(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"x": x})
        x.grad = np.array([np.nan])
        with pytest.raises(FloatingPointError, match="x"):
            opt.step(0.1)
        assert opt.t == 0

    def test_clip_global_norm(self):
        a, b = Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
        assert math.sqrt((a.grad**2).sum() + (b.grad**2).sum()) == pytest.approx(1.0, rel=1e-9)
        a.grad = np.array([0.3, 0.0])
        b.grad = np.array([0.4])
        clip_grad_norm([a, b], 1.0)
        np.testing.assert_array_equal(a.grad, [0.3, 0.0])


@pytest.fixture(scope="module")
def tiny():
    cfg = tiny_run_config(n=60)
    corpus = synthetic_corpus(cfg["data"], seed=0)
    return cfg, corpus


def _model(cfg, corpus, kind="transformer", seed=0):
    return build_model(kind, cfg, len(corpus.vocab), seed)


class TestXE:
    def test_teacher_forcing_reads_ground_truth(self, tiny):
        cfg, corpus = tiny
        m = _model(cfg, corpus)
        seen = []
        orig = m.forward
        m.forward = lambda f, t, *a, **k: (seen.append(np.array(t)), orig(f, t, *a, **k))[1]
        toks = corpus.train.tokens[:3]
        xe_loss(m, corpus.train.features[:3], toks)
        np.testing.assert_array_equal(seen[0], toks[:, :-1])

    def test_pad_positions_ignored(self, tiny):
        cfg, corpus = tiny
        m = _model(cfg, corpus)
        toks = corpus.train.tokens[:2].copy()
        base = xe_loss(m, corpus.train.features[:2], toks).item()
        # the logits at padded target positions never enter the loss
        toks2 = toks.copy()
        last = np.flatnonzero(toks2[0] == EOS)[0]
        assert toks2[0, last + 1] == PAD
        assert xe_loss(m, corpus.train.features[:2], toks2).item() == base

    def test_empty_dataset(self, tiny):
        cfg, corpus = tiny
        empty = corpus.train.subset([])
        with pytest.raises(ValueError, match="empty"):
            Trainer(_model(cfg, corpus), empty, TrainConfig(), corpus.vocab)

    def test_probe_loss_decreases_over_first_100_steps(self):
        cfg = tiny_run_config(n=600)
        cfg["transformer"].update(d_model=16, d_ff=32, dropout_p=0.0)
        corpus = synthetic_corpus(cfg["data"], seed=1)
        m = build_model("transformer", cfg, len(corpus.vocab), 1)
        tc = TrainConfig(peak_lr_xe=1e-3, warmup_steps=50, seed=1)
        tr = Trainer(m, corpus.train, tc, corpus.vocab)
        probe = corpus.train.subset(range(40))
        losses = []

        def probe_loss():
            with ad.no_grad():
                return xe_loss(m, probe.features, probe.tokens).item()

        losses.append(probe_loss())
        for idx in list(tr.batches(0))[:100]:
            tr.step += 1
            tr._update(xe_loss(m, corpus.train.features[idx], corpus.train.tokens[idx]),
                       lr_schedule(tr.step, tc))
            losses.append(probe_loss())
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_same_seed_same_parameters(self, tiny):
        cfg, corpus = tiny
        runs = []
        for _ in range(2):
            m = _model(cfg, corpus, seed=4)
            train_xe(m, corpus.train, train_config(cfg, "xe", len(corpus.train), 4), corpus.vocab)
            runs.append({k: v.tobytes() for k, v in m.state_dict().items()})
        assert runs[0] == runs[1]

    def test_log_records(self, tiny):
        cfg, corpus = tiny
        recs = []
        tr = train_xe(_model(cfg, corpus), corpus.train, train_config(cfg, "xe", len(corpus.train), 0),
                      corpus.vocab, corpus.val, log_fn=recs.append)
        assert len(recs) == tr.step == 2 * math.ceil(len(corpus.train) / 5)
        assert set(recs[0]) == {"step", "phase", "lr", "loss"}
        assert "val_loss" in tr.history[-1]


class TestScstMath:
    def _sampled(self, rng, B=3, V=11):
        out = []
        for _ in range(B):
            n = int(rng.integers(1, 5))
            s = list(rng.integers(3, V, size=n))
            out.append(s + [EOS])
        return out

    def test_zero_advantage_zero_gradient_exact(self):
        rng = np.random.default_rng(0)
        m = tiny_transformer()
        feats = rng.normal(size=(3, 4, 6))
        loss = scst_surrogate(m, feats, self._sampled(rng), np.zeros(3))
        ad.backward(loss)
        assert loss.item() == 0.0
        for p in m.parameters():
            assert p.grad is None or not np.any(p.grad)

    def test_formula(self):
        rng = np.random.default_rng(1)
        m = tiny_transformer()
        feats = rng.normal(size=(1, 4, 6))
        s = self._sampled(rng, B=1)
        from surginstruct.decoding import sequence_logprob
        lp = sequence_logprob(m, feats[0], s[0])
        loss = scst_surrogate(m, feats, s, np.array([0.6 - 0.4])).item()
        assert loss == pytest.approx(-0.2 * lp, rel=1e-12)

    def test_surrogate_gradcheck(self):
        rng = np.random.default_rng(2)
        m = tiny_transformer()
        feats = rng.normal(size=(3, 4, 6))
        sampled = self._sampled(rng)
        adv = np.array([0.7, -0.3, 1.1])
        assert model_gradcheck(m, lambda mm: scst_surrogate(mm, feats, sampled, adv)) <= 1e-3

    def test_identical_sample_and_greedy_give_zero_advantage(self, tiny, monkeypatch):
        cfg, corpus = tiny
        m = _model(cfg, corpus)
        from surginstruct import training
        monkeypatch.setattr(training, "sample_decode",
                            lambda model, f, rng, max_len, state: (training.greedy_decode(model, f, max_len, state),
                                                                   None))
        idx = [0, 1, 2]
        loss, info = scst_step(m, corpus.train.features[idx], [corpus.train.refs[i] for i in idx],
                               cider_reward(CiderD(corpus.train.refs)), np.random.default_rng(0),
                               corpus.vocab, max_len=8)
        assert info["sampled"] == info["greedy"]
        np.testing.assert_array_equal(info["advantage"], 0.0)
        ad.backward(loss)
        for p in m.parameters():
            assert p.grad is None or not np.any(p.grad)

    def test_reward_failure_is_reported(self, tiny):
        cfg, corpus = tiny

        def broken(h, r):
            raise KeyError("boom")

        with pytest.raises(RuntimeError, match="reward function failed"):
            scst_step(_model(cfg, corpus), corpus.train.features[:2], corpus.train.refs[:2], broken,
                      np.random.default_rng(0), corpus.vocab, max_len=6)

    def test_reward_shift_invariance(self, tiny):
        """Mean update over 1000 batches with reward + c matches reward within 3 sigma."""
        cfg, corpus = tiny
        m = _model(cfg, corpus)
        scorer = CiderD(corpus.train.refs)
        base = cider_reward(scorer)
        shifted = lambda h, r: base(h, r) + 2.5  # noqa: E731
        direction = {k: np.random.default_rng(9).normal(size=p.shape) for k, p in m.params.items()}
        feats, refs = corpus.train.features[:5], corpus.train.refs[:5]

        def projected(reward, rng):
            m.zero_grad()
            loss, _ = scst_step(m, feats, refs, reward, rng, corpus.vocab, max_len=8)
            ad.backward(loss)
            return sum(float((p.grad * direction[k]).sum()) for k, p in m.params.items() if p.grad is not None)

        n = 1000
        r1, r2 = np.random.default_rng(100), np.random.default_rng(200)
        a = np.array([projected(base, r1) for _ in range(n)])
        b = np.array([projected(shifted, r2) for _ in range(n)])
        se = math.sqrt(a.var(ddof=1) / n + b.var(ddof=1) / n)
        assert se > 0
        assert abs(a.mean() - b.mean()) <= 3 * se
        # with a shared random stream the shift cancels up to rounding of (r + c) - (g + c)
        same = [projected(base, np.random.default_rng(7)), projected(shifted, np.random.default_rng(7))]
        assert same[1] == pytest.approx(same[0], rel=1e-12)


class TestScstLoop:
    def test_zero_lr_leaves_parameters(self, tiny):
        cfg, corpus = tiny
        m = _model(cfg, corpus)
        before = {k: v.tobytes() for k, v in m.state_dict().items()}
        tc = train_config(cfg, "scst", len(corpus.train), 0)
        tc.lr_scst = 0.0
        tr = train_scst(m, corpus.train, tc, corpus.vocab)
        assert {k: v.tobytes() for k, v in m.state_dict().items()} == before
        rec = tr.history[-1]
        assert set(rec) >= {"reward_sampled", "reward_greedy", "advantage"}

    def test_idf_frozen_from_training_refs(self, tiny):
        cfg, corpus = tiny
        tr = Trainer(_model(cfg, corpus), corpus.train, train_config(cfg, "scst", len(corpus.train), 0),
                     corpus.vocab)
        tr.scst_epoch()
        assert tr.scorer.df == CiderD(corpus.train.refs).df


class TestResume:
    def test_restore_equals_uninterrupted(self, tiny):
        cfg, corpus = tiny
        tc = train_config(cfg, "xe", len(corpus.train), 3)
        full_log = []
        m1 = _model(cfg, corpus, seed=3)
        t1 = Trainer(m1, corpus.train, tc, corpus.vocab, log_fn=full_log.append)
        t1.xe_epoch()
        t1.xe_epoch()

        part_log = []
        m2 = _model(cfg, corpus, seed=3)
        t2 = Trainer(m2, corpus.train, tc, corpus.vocab, log_fn=part_log.append)
        t2.xe_epoch()
        snap_params, snap_state = m2.state_dict(), t2.state()
        m3 = _model(cfg, corpus, seed=99)
        m3.load_state_dict(snap_params)
        t3 = Trainer(m3, corpus.train, tc, corpus.vocab, log_fn=part_log.append)
        t3.restore(snap_state)
        t3.xe_epoch()
        assert [r["loss"] for r in part_log] == [r["loss"] for r in full_log]
        for k in m1.params:
            assert m1.params[k].data.tobytes() == m3.params[k].data.tobytes()
