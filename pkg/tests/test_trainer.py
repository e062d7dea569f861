import copy
from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny_config
from ssvc.features import DomainPair, FeatureMap, SynthConfig, sample_batch, synth_dataset
from ssvc.losses import LossWeights, discriminator_loss, generator_loss
from ssvc.metrics import mcd
from ssvc import trainer as T
from ssvc.trainer import (
    DEFAULT_GRID,
    Adam,
    DivergenceError,
    TrainConfig,
    TrainState,
    ablate,
    ablation_csv,
    align_config,
    convert,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def small():
    return synth_dataset(SynthConfig(n_domains=3, n_mcep=8, n_frames=8, train_per_domain=4, eval_per_domain=2, seed=3))


def small_cfg(**kw):
    base = dict(
        epochs=3,
        batch_size=3,
        steps_per_epoch=2,
        early_stop_patience=3,
        eval_per_domain=1,
        seed=11,
        net=tiny_config(dtype="float64"),
    )
    base.update(kw)
    return TrainConfig(**base)


def fresh(corpus, cfg):
    cfg = align_config(cfg, corpus)
    return TrainState.fresh(cfg), cfg


def strip(logs):
    return [replace(e, wall_ms=0.0) for e in logs]


def adam_oracle(p, g, m, v, t, lr, b1, b2, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1**t)
    vh = v / (1 - b2**t)
    return p - lr * mh / (np.sqrt(vh) + eps), m, v


class TestAdam:
    def test_two_steps_against_oracle(self):
        from ssvc.tensor import Tensor

        rng = np.random.default_rng(0)
        w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        opt = Adam([w], lr=0.01, beta1=0.5, beta2=0.999)
        p, m, v = w.data.copy(), np.zeros((3, 4)), np.zeros((3, 4))
        for t in (1, 2):
            g = rng.standard_normal((3, 4))
            w.grad = g.copy()
            opt.step()
            p, m, v = adam_oracle(p, g, m, v, t, 0.01, 0.5, 0.999)
            np.testing.assert_allclose(w.data, p, atol=1e-14, rtol=0)

    def test_zero_grad_clears(self):
        from ssvc.tensor import Tensor

        w = Tensor(np.ones(2), requires_grad=True)
        w.grad = np.ones(2)
        opt = Adam([w], 0.1)
        opt.zero_grad()
        assert w.grad is None


class TestTrainStep:
    def test_parameter_delta_matches_hand_stepped_adam(self, small):
        state, cfg = fresh(small, small_cfg())
        batch = sample_batch(small.train, cfg.batch_size, np.random.default_rng(1))
        ref = copy.deepcopy(state)

        # independent replay: D update, then G update against the updated D
        dl = discriminator_loss(batch.x, batch.source, batch.target, ref.G, ref.D, cfg.weights, cfg.t1, cfg.t2, ref.rng, cfg.tau)
        dl.total.backward()
        want_d = {}
        for name, p in ref.D.params.items():
            new, _, _ = adam_oracle(p.data, p.grad, 0.0, 0.0, 1, cfg.lr_d, cfg.adam_beta1, cfg.adam_beta2)
            want_d[name] = new
            p.data = new
        gl = generator_loss(batch.x, batch.source, batch.target, ref.G, ref.D)
        gl.backward()
        want_g = {
            name: adam_oracle(p.data, p.grad, 0.0, 0.0, 1, cfg.lr_g, cfg.adam_beta1, cfg.adam_beta2)[0]
            for name, p in ref.G.params.items()
        }

        train_step(state, batch, cfg)
        for name, p in state.D.params.items():
            np.testing.assert_allclose(p.data, want_d[name], atol=1e-10, rtol=0)
        for name, p in state.G.params.items():
            np.testing.assert_allclose(p.data, want_g[name], atol=1e-10, rtol=0)

    def test_decomposition_against_baseline(self, small):
        cfg = small_cfg(weights=LossWeights(0.3, 0.2))
        base = small_cfg(weights=LossWeights(0.0, 0.0))
        batch = sample_batch(small.train, 3, np.random.default_rng(2))
        s1, c1 = fresh(small, cfg)
        s0, c0 = fresh(small, base)
        r1 = train_step(s1, batch, c1)
        r0 = train_step(s0, batch, c0)
        assert r0.adv == r1.adv
        assert r1.d_loss - r0.d_loss == pytest.approx(0.3 * r1.sim_term + 0.2 * r1.con_term, abs=1e-12)

    def test_baseline_is_exactly_negative_adversarial(self, small):
        state, cfg = fresh(small, small_cfg(weights=LossWeights(0.0, 0.0)))
        rng = np.random.default_rng(3)
        for _ in range(3):
            rec = train_step(state, sample_batch(small.train, 3, rng), cfg)
            assert rec.d_loss == -rec.adv

    def test_half_steps_touch_only_their_network(self, small):
        state, cfg = fresh(small, small_cfg())
        seen = []
        d_step, g_step = state.opt_d.step, state.opt_g.step

        def wrapped(step, mine, other):
            def run():
                before = (mine.checksum(), other.checksum())
                step()
                after = (mine.checksum(), other.checksum())
                seen.append((before[0] != after[0], before[1] == after[1]))

            return run

        state.opt_d.step = wrapped(d_step, state.D, state.G)
        state.opt_g.step = wrapped(g_step, state.G, state.D)
        train_step(state, sample_batch(small.train, 3, np.random.default_rng(4)), cfg)
        assert seen == [(True, True), (True, True)]

    def test_d_steps_per_g_step(self, small):
        state, cfg = fresh(small, small_cfg(d_steps_per_g_step=3))
        train_step(state, sample_batch(small.train, 3, np.random.default_rng(5)), cfg)
        assert (state.opt_d.t, state.opt_g.t) == (3, 1)

    def test_divergence_names_the_term(self, small):
        state, cfg = fresh(small, small_cfg())
        state.D.params["cls.b"].data[...] = np.nan
        with pytest.raises(DivergenceError, match="adv"):
            train_step(state, sample_batch(small.train, 3, np.random.default_rng(6)), cfg)


class TestTrain:
    def test_single_epoch(self, small, tmp_path):
        r = train(small, small_cfg(epochs=1, early_stop_patience=1))
        assert len(r.logs) == 1 and r.logs[0].epoch == 1
        assert len(r.logs[0].pair_mcd) == 6
        save_checkpoint(tmp_path / "c.ckpt", r.state, r.config)
        state, cfg = load_checkpoint(tmp_path / "c.ckpt")
        assert state.epoch == 1 and cfg == r.config

    def test_deterministic_logs(self, small):
        a = train(small, small_cfg())
        b = train(small, small_cfg())
        assert strip(a.logs) == strip(b.logs)
        assert a.final_mcd == b.final_mcd and a.stability == b.stability

    def test_frozen_generator_stops_after_two_epochs(self, small):
        cfg = small_cfg(epochs=10, early_stop_patience=1)
        state, cfg = fresh(small, cfg)
        state.opt_g.step = lambda: None
        r = train(small, cfg, state=state)
        assert [e.epoch for e in r.logs] == [1, 2]
        assert r.stopped_early
        assert r.logs[0].eval_mcd == r.logs[1].eval_mcd

    def test_never_exceeds_epoch_budget(self, small):
        r = train(small, small_cfg(epochs=4, early_stop_patience=4))
        assert len(r.logs) <= 4
        assert [e.epoch for e in r.logs] == list(range(1, len(r.logs) + 1))

    def test_logs_are_finite_and_window(self, small):
        r = train(small, small_cfg(epochs=6, early_stop_patience=6))
        for e in r.logs:
            assert np.isfinite([e.d_loss, e.g_loss, e.sim_term, e.con_term, e.eval_mcd]).all()
        assert r.window == T.stability_window(len(r.logs)) == 2

    def test_on_epoch_callback(self, small):
        seen = []
        train(small, small_cfg(epochs=2, early_stop_patience=2), on_epoch=lambda e: seen.append(e.epoch))
        assert seen == [1, 2]

    def test_resume_is_bit_exact(self, small, tmp_path):
        full = train(small, small_cfg(epochs=3))
        part = train(small, small_cfg(epochs=2, early_stop_patience=2))
        save_checkpoint(tmp_path / "p.ckpt", part.state, part.config)
        state, _ = load_checkpoint(tmp_path / "p.ckpt")
        rest = train(small, small_cfg(epochs=3), state=state)
        assert strip(rest.logs) == strip(full.logs[2:])
        assert rest.state.G.checksum() == full.state.G.checksum()
        assert rest.state.D.checksum() == full.state.D.checksum()

    def test_invalid_config(self, small):
        with pytest.raises(ValueError):
            train(small, small_cfg(epochs=2, early_stop_patience=3))
        with pytest.raises(ValueError):
            train(small, small_cfg(lr_g=0.0))

    def test_stability_window_rule(self):
        assert T.stability_window(300) == 100
        assert T.stability_window(90) == 30
        assert T.stability_window(2) == 1


class TestCheckpoint:
    def test_round_trip_state(self, small, tmp_path):
        r = train(small, small_cfg(epochs=2, early_stop_patience=2))
        save_checkpoint(tmp_path / "a.ckpt", r.state, r.config)
        s, cfg = load_checkpoint(tmp_path / "a.ckpt")
        assert s.G.checksum() == r.state.G.checksum() and s.D.checksum() == r.state.D.checksum()
        for a, b in zip(s.opt_d.m + s.opt_d.v + s.opt_g.m, r.state.opt_d.m + r.state.opt_d.v + r.state.opt_g.m):
            assert np.array_equal(a, b)
        assert s.rng.bit_generator.state == r.state.rng.bit_generator.state
        assert (s.best_mcd, s.best_epoch, s.since_best) == (r.state.best_mcd, r.state.best_epoch, r.state.since_best)

    def test_bad_magic_and_truncation(self, small, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"nope")
        with pytest.raises(T.CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")
        r = train(small, small_cfg(epochs=1, early_stop_patience=1))
        save_checkpoint(tmp_path / "y.ckpt", r.state, r.config)
        buf = (tmp_path / "y.ckpt").read_bytes()
        (tmp_path / "z.ckpt").write_bytes(buf[:-100])
        with pytest.raises(T.CheckpointError):
            load_checkpoint(tmp_path / "z.ckpt")


class TestConvert:
    def test_shape_determinism_purity(self, small):
        r = train(small, small_cfg(epochs=1, early_stop_patience=1))
        G = r.state.G
        before = G.checksum()
        x = small.eval[0]
        a = convert(G, x, DomainPair(1, 2))
        b = convert(G, x, DomainPair(1, 2))
        assert a.data.shape == x.data.shape and a.domain == 2
        assert np.array_equal(a.data, b.data)
        assert G.checksum() == before

    def test_mismatches(self, small):
        r = train(small, small_cfg(epochs=1, early_stop_patience=1))
        with pytest.raises(ValueError):
            convert(r.state.G, FeatureMap(np.zeros((8, 16)), 1), DomainPair(1, 2))
        with pytest.raises(ValueError):
            convert(r.state.G, small.eval[0], DomainPair(1, 4))


class TestAblate:
    def test_default_grid_is_table_order(self):
        assert DEFAULT_GRID == ((0.0, 0.01), (0.01, 0.0), (0.01, 0.01), (0.02, 0.05), (0.05, 0.02), (0.1, 0.1))

    def test_single_point_and_duplicates(self, small):
        cfg = small_cfg(epochs=2, early_stop_patience=2)
        rows = ablate(small, cfg, [(0.01, 0.02)])
        assert len(rows) == 1 and rows[0]["status"] == "ok"
        dup = ablate(small, cfg, [(0.05, 0.0), (0.05, 0.0)])
        assert dup[0] == dup[1]

    def test_failure_is_recorded(self, small, monkeypatch):
        real = T.train

        def flaky(corpus, cfg, *a, **k):
            if cfg.weights.lambda1 == 0.5:
                raise DivergenceError("discriminator adv term diverged")
            return real(corpus, cfg, *a, **k)

        monkeypatch.setattr(T, "train", flaky)
        rows = ablate(small, small_cfg(epochs=1, early_stop_patience=1), [(0.5, 0.0), (0.0, 0.0)])
        assert rows[0]["status"].startswith("error") and np.isnan(rows[0]["final_mcd"])
        assert rows[1]["status"] == "ok"
        text = ablation_csv(rows)
        assert text.splitlines()[0] == "lambda1,lambda2,final_mcd,stability,status"
        assert len(text.splitlines()) == 3

    def test_empty_grid(self, small):
        with pytest.raises(ValueError):
            ablate(small, small_cfg(), [])


def test_config_dict_round_trip():
    cfg = small_cfg(weights=LossWeights(0.02, 0.05))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_eval_mcd_is_mean_of_pairs(small):
    r = train(small, small_cfg(epochs=1, early_stop_patience=1))
    e = r.logs[0]
    assert e.eval_mcd == pytest.approx(np.mean(list(e.pair_mcd.values())), abs=1e-12)
    G = r.state.G
    # recompute one pair by hand
    xs = small.eval.of_domain(2)[:1]
    want = np.mean([mcd(y, small.prototypes[2]) for y in T.convert_array(G, xs, 2, 3)])
    assert T.evaluate_pairs(G, small.eval, small.prototypes, 1)[(2, 3)][0] == pytest.approx(want, abs=1e-12)
