import math

import numpy as np
import pytest

from ltmlab import cells, engine
from ltmlab.engine import Metrics, NonFiniteLossError, TrainConfig, metrics_from_nll
from ltmlab.model import Model, ModelConfig
from ltmlab.numeric import Rng


def small_model(seed=0, cell="ltm", d=4, vocab=5, layers=1, init_scale=1.0,
                **cfg_kw):
    cfg = ModelConfig(cell_kind=cell, layers=layers, hidden=d, embed_dim=d,
                      vocab=vocab, init_scale=init_scale, **cfg_kw)
    return Model.init(cfg, Rng(seed).child("model-init"))


class FakeCorpus:
    def __init__(self, train, valid, test=None):
        self.train = np.asarray(train, dtype=np.int64)
        self.valid = np.asarray(valid, dtype=np.int64)
        self.test = np.asarray(test if test is not None else valid, dtype=np.int64)


def random_corpus(seed, vocab, n_train=600, n_valid=120):
    rng = Rng(seed)
    return FakeCorpus(rng.child("tr").integers(vocab, n_train),
                      rng.child("va").integers(vocab, n_valid))


class TestForwardSequence:
    def test_uniform_model_predicts_ln_v(self):
        model = small_model(vocab=4, init_scale=0.0)
        tokens = np.array([0, 1, 2, 3, 0, 2], dtype=np.int64)
        loss, nll, _ = engine.forward_sequence(model, tokens)
        assert np.allclose(nll, math.log(4.0), atol=1e-9)
        assert loss == pytest.approx(5 * math.log(4.0), abs=1e-8)

    def test_length_two_gives_one_term(self):
        model = small_model(vocab=5)
        _, nll, _ = engine.forward_sequence(model, np.array([1, 2]))
        assert nll.shape == (1,)

    def test_rejects_bad_tokens(self):
        model = small_model(vocab=5)
        with pytest.raises(ValueError):
            engine.forward_sequence(model, np.array([3]))
        with pytest.raises(ValueError):
            engine.forward_sequence(model, np.array([1, 7]))

    def test_matches_independent_reimplementation(self):
        # separate route: single-step cell functions plus a hand-rolled softmax
        model = small_model(seed=3, vocab=6, d=5, layers=2)
        tokens = Rng(9).integers(6, 40)

        states = [cells.ltm_zero_state(5) for _ in model.layers]
        total = 0.0
        for t in range(len(tokens) - 1):
            x = model.embed[tokens[t]]
            _, states, top = cells.stack_step(model.layers, states, x)
            logits = model.out_w @ top + model.out_b
            z = np.exp(logits - logits.max())
            p = z / z.sum()
            total += -math.log(p[tokens[t + 1]])

        loss, _, _ = engine.forward_sequence(model, tokens)
        assert loss == pytest.approx(total, abs=1e-10)

    def test_chunking_does_not_change_loss(self):
        model = small_model(seed=4, vocab=5)
        tokens = Rng(10).integers(5, 120)
        base, nll_a, _ = engine.forward_sequence(model, tokens, chunk=1000)
        split, nll_b, _ = engine.forward_sequence(model, tokens, chunk=7)
        assert np.allclose(nll_a, nll_b, atol=1e-12)
        assert base == pytest.approx(split, abs=1e-12)


class TestBackwardSequence:
    def test_full_window_matches_finite_differences(self):
        model = small_model(seed=1, vocab=5, d=4)
        tokens = Rng(2).integers(5, 13)  # T = 12 predictions
        _, grads = engine.sequence_grads(model, tokens)

        eps = 1e-5
        worst = 0.0
        for name, p in model.named_params():
            flat = p.reshape(-1)
            gflat = grads[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                lp, _, _ = engine.forward_sequence(model, tokens)
                flat[i] = orig - eps
                lm, _, _ = engine.forward_sequence(model, tokens)
                flat[i] = orig
                num = (lp - lm) / (2 * eps)
                worst = max(worst, abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), 1.0))
        assert worst < 1e-5, worst

    def test_single_step_window_reduces_to_cell_backward(self):
        model = small_model(seed=6, vocab=4, d=3)
        tokens = np.array([1, 2], dtype=np.int64)
        _, grads = engine.sequence_grads(model, tokens)

        # compose the projection/softmax gradient with the one-step cell backward
        x = model.embed[tokens[0]]
        tr, st = cells.ltm_step(model.layers[0], cells.ltm_zero_state(3), x)
        logits = model.out_w @ st.h + model.out_b
        z = np.exp(logits - logits.max())
        p = z / z.sum()
        glog = p.copy()
        glog[tokens[1]] -= 1.0
        gh = model.out_w.T @ glog
        g, _, _, _ = cells.ltm_backward(model.layers[0], tr, gh, np.zeros(3))
        assert np.allclose(g.w1, grads["layer0.w1"], atol=1e-12)
        assert np.allclose(g.w4, grads["layer0.w4"], atol=1e-12)

    def test_loss_scale_doubles_gradients_exactly(self):
        model = small_model(seed=7, vocab=5, d=4)
        tokens = Rng(3).integers(5, 9)
        states = model.zero_states(1)
        x, y = tokens[:-1, None], tokens[1:, None]
        w1 = np.ones((x.shape[0], 1))
        r1 = engine.run_window(model, x, y, states, loss_weights=w1)
        r2 = engine.run_window(model, x, y, model.zero_states(1),
                               loss_weights=2.0 * w1)
        for name in r1.grads:
            assert np.array_equal(2.0 * r1.grads[name], r2.grads[name])

    def test_truncation_changes_gradients(self):
        model = small_model(seed=8, vocab=5, d=4)
        tokens = Rng(4).integers(5, 17)  # 16 steps
        _, full = engine.sequence_grads(model, tokens)

        states = model.zero_states(1)
        halves = {}
        for lo, hi in ((0, 8), (8, 16)):
            run = engine.run_window(model, tokens[lo:hi, None],
                                    tokens[lo + 1:hi + 1, None], states)
            states = run.new_states
            for k, v in run.grads.items():
                halves[k] = halves.get(k, 0) + v
        assert any(not np.allclose(full[k], halves[k], atol=1e-12) for k in full)

    def test_state_carry_loss_exact(self):
        model = small_model(seed=9, vocab=5, d=4)
        tokens = Rng(5).integers(5, 33)
        one, _, _ = engine.forward_sequence(model, tokens, chunk=100)
        two, _, _ = engine.forward_sequence(model, tokens, chunk=16)
        assert abs(one - two) < 1e-12


class TestMetricsAndEvaluate:
    def test_uniform_ppl_equals_vocab(self):
        model = small_model(vocab=10, init_scale=0.0)
        ids = Rng(1).integers(10, 400)
        m = engine.evaluate(model, ids)
        assert m.perplexity == pytest.approx(10.0, abs=1e-9)

    def test_uniform_binary_bpc_is_one(self):
        model = small_model(vocab=2, init_scale=0.0)
        ids = Rng(2).integers(2, 300)
        m = engine.evaluate(model, ids)
        assert m.bpc == pytest.approx(1.0, abs=1e-12)

    def test_perplexity_identity(self):
        for nll in (0.3, 1.7, 4.0):
            m = metrics_from_nll(nll, 10)
            assert m.perplexity == pytest.approx(math.exp(m.bpc * math.log(2)),
                                                 rel=1e-15)

    def test_empty_split_rejected(self):
        model = small_model(vocab=5)
        with pytest.raises(ValueError):
            engine.evaluate(model, np.array([], dtype=np.int64))

    def test_eval_matches_forward_sequence_when_window_covers_all(self):
        model = small_model(seed=12, vocab=5, d=4)
        tokens = Rng(6).integers(5, 50)
        m = engine.evaluate(model, tokens, batch_size=1, bptt_len=1000)
        loss, nll, _ = engine.forward_sequence(model, tokens)
        assert m.nll_mean == pytest.approx(loss / nll.size, abs=1e-12)


class TestOptimizers:
    def test_sgd_step_reduces_frozen_batch_loss(self):
        model = small_model(seed=13, vocab=6, d=5)
        tokens = Rng(7).integers(6, 40)
        loss0, grads = engine.sequence_grads(model, tokens)
        opt = engine.Sgd(lr=1e-4)
        opt.step(model, grads)
        loss1, _, _ = engine.forward_sequence(model, tokens)
        assert loss1 < loss0

    @pytest.mark.parametrize("kind", ["sgd", "momentum", "adam"])
    def test_optimizers_make_progress(self, kind):
        corpus = random_corpus(20, vocab=6)
        model = small_model(seed=14, vocab=6, d=6)
        cfg = TrainConfig(batch_size=4, bptt_len=8, epochs=2, optimizer=kind,
                          lr=0.05 if kind != "adam" else 5e-3, seed=0)
        reports = []
        engine.train(model, corpus, cfg, reports.append)
        tr = [r["nll"] for r in reports if r["split"] == "train"]
        assert tr[-1] < math.log(6.0) + 0.05

    def test_grad_clip(self):
        grads = {"a": np.array([3.0, 4.0])}
        norm = engine.clip_grads(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert np.allclose(grads["a"], [0.6, 0.8])

    def test_auto_clip_resolution(self):
        cfg = TrainConfig(grad_clip="auto")
        assert cfg.resolved_clip("rnn") == 5.0
        assert cfg.resolved_clip("ltm") is None
        assert TrainConfig(grad_clip=2.5).resolved_clip("rnn") == 2.5


class TestTrain:
    def test_zero_epochs_returns_initial_checkpoint(self):
        corpus = random_corpus(21, vocab=5)
        model = small_model(seed=15, vocab=5)
        before = {k: v.copy() for k, v in model.named_params()}
        reports = []
        ckpt = engine.train(model, corpus, TrainConfig(epochs=0, batch_size=4,
                                                       bptt_len=8), reports.append)
        assert reports == []
        assert ckpt.epoch == 0
        for k, v in model.named_params():
            assert np.array_equal(before[k], v)
            assert np.array_equal(ckpt.tensors[k], v)

    def test_same_seed_is_bit_identical(self):
        def one_run():
            corpus = random_corpus(22, vocab=6)
            model = small_model(seed=16, vocab=6, d=6)
            cfg = TrainConfig(batch_size=4, bptt_len=8, epochs=2, seed=5)
            reports = []
            tick = iter(range(10 ** 6))
            ckpt = engine.train(model, corpus, cfg, reports.append,
                                clock=lambda: float(next(tick)))
            return reports, ckpt.to_bytes()

        r1, b1 = one_run()
        r2, b2 = one_run()
        assert r1 == r2
        assert b1 == b2

    def test_nonfinite_loss_raises_with_location(self):
        corpus = random_corpus(23, vocab=5)
        model = small_model(seed=17, vocab=5)
        model.embed[0, 0] = np.nan
        with pytest.raises(NonFiniteLossError, match="epoch 1, window 0"):
            engine.train(model, corpus, TrainConfig(batch_size=4, bptt_len=8,
                                                    epochs=1))

    def test_reports_have_expected_fields(self):
        corpus = random_corpus(24, vocab=5)
        model = small_model(seed=18, vocab=5)
        reports = []
        engine.train(model, corpus,
                     TrainConfig(batch_size=4, bptt_len=8, epochs=1),
                     reports.append)
        assert [r["split"] for r in reports] == ["train", "valid"]
        for r in reports:
            assert list(r.keys()) == ["epoch", "split", "nll", "ppl", "bpc",
                                      "grad_norm_mean", "grad_norm_max",
                                      "seconds"]
        assert reports[0]["grad_norm_mean"] is not None
        assert reports[1]["grad_norm_mean"] is None


class TestCheckpointIntegration:
    def _trained(self):
        corpus = random_corpus(25, vocab=6)
        model = small_model(seed=19, vocab=6, d=5)
        cfg = TrainConfig(batch_size=4, bptt_len=8, epochs=1, seed=3)
        ckpt = engine.train(model, corpus, cfg)
        return corpus, model, cfg, ckpt

    def test_roundtrip_bytes_stable(self):
        _, _, _, ckpt = self._trained()
        blob = ckpt.to_bytes()
        from ltmlab.checkpoint import Checkpoint
        again = Checkpoint.from_bytes(blob).to_bytes()
        assert blob == again

    def test_restore_reproduces_subsequent_training_exactly(self):
        corpus, model, cfg, ckpt = self._trained()
        from ltmlab.checkpoint import Checkpoint
        restored = Checkpoint.from_bytes(ckpt.to_bytes())
        model2 = engine.model_from_checkpoint(restored)
        for (k1, v1), (k2, v2) in zip(model.named_params(), model2.named_params()):
            assert k1 == k2 and np.array_equal(v1, v2)

        opt1 = engine.optimizer_from_checkpoint(ckpt, model)
        opt2 = engine.optimizer_from_checkpoint(restored, model2)

        data = engine.batch_stream(corpus.train, 4)
        for m, o in ((model, opt1), (model2, opt2)):
            states = m.zero_states(4)
            _, x, y = next(iter(engine._iter_windows(data, 8)))
            run = engine.run_window(m, x, y, states)
            o.step(m, run.grads)
        for (_, v1), (_, v2) in zip(model.named_params(), model2.named_params()):
            assert np.array_equal(v1, v2)
