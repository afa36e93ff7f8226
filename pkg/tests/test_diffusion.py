import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dit_grow.data import gen_synthetic_dataset, make_dataset
from dit_grow.diffusion import (
    CsvMetrics,
    DropoutPolicy,
    GuidanceScales,
    NoiseDraw,
    TrainingDiverged,
    cfg_epsilon,
    cfg_single,
    combine_guidance,
    ddim_sample,
    ddim_timesteps,
    draw_noise,
    guidance_passes,
    make_schedule,
    q_sample,
    sample_condition_mask,
    train_loop,
    training_loss,
)
from dit_grow.expansion import ExpansionSpec, expand_model, plan_expansion, random_probe
from dit_grow.model import ModelConfig, init_model
from dit_grow.rng import Rng
from dit_grow.tensor import Tensor
from dit_grow.text import EncoderConfig, Encoders, StubEncoder, inject_llm_branch
from dit_grow.verify import gradient_errors

CFG = ModelConfig(channels=2, frames=2, height=3, width=3, hidden=8, heads=2, blocks=2, ffn_mult=2,
                  t5_width=8, llm_width=8)


def tiny_dataset(cfg=CFG, n=16):
    enc = Encoders(StubEncoder("t5", EncoderConfig(6, cfg.t5_width)),
                   StubEncoder("llm", EncoderConfig(8, cfg.llm_width)))
    return make_dataset(gen_synthetic_dataset(n, cfg, 0), enc)


class TestSchedule:
    def test_constant_betas(self):
        s = make_schedule(10, 0.01, 0.01)
        assert np.all(s.betas == 0.01)

    def test_first_abar(self):
        s = make_schedule()
        assert s.alphas_cumprod[0] == 1.0 - s.betas[0]

    def test_monotone_and_small_tail(self):
        s = make_schedule()
        assert np.all(np.diff(s.betas) > 0)
        assert np.all(np.diff(s.alphas_cumprod) < 0)
        assert s.alphas_cumprod[-1] < 0.01
        # product oracle, term by term in plain floats
        prod = 1.0
        for b in np.linspace(1e-4, 2e-2, 1000):
            prod *= 1.0 - float(b)
        assert math.isclose(prod, s.alphas_cumprod[-1], rel_tol=1e-9)

    @pytest.mark.parametrize("args", [(1, 1e-4, 2e-2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            make_schedule(*args)


class TestQSample:
    def test_zero_noise(self):
        s = make_schedule()
        z0 = Rng(0).normal((3, 2, 2)).astype(np.float32)
        t = np.array([0, 500, 999])
        abar = s.alphas_cumprod[t].reshape(-1, 1, 1)
        np.testing.assert_array_equal(q_sample(z0, t, np.zeros_like(z0), s), (np.sqrt(abar) * z0).astype(np.float32))

    def test_endpoints(self):
        s = make_schedule(1000, 1e-12, 0.5)
        z0 = Rng(1).normal((1, 8)).astype(np.float32)
        eps = Rng(2).normal((1, 8)).astype(np.float32)
        np.testing.assert_allclose(q_sample(z0, [0], eps, s), z0, atol=1e-5)
        np.testing.assert_allclose(q_sample(z0, [999], eps, s), eps, atol=1e-5)

    def test_variance_monte_carlo(self):
        s = make_schedule()
        n, t = 10_000, 300
        rng = Rng(3)
        z0 = rng.normal((n, 1), math.sqrt(2.0))
        eps = rng.normal((n, 1))
        zt = q_sample(z0, np.full(n, t), eps, s).astype(np.float64)
        abar = s.alphas_cumprod[t]
        expected = abar * z0.var() + (1 - abar)
        assert abs(zt.var() - expected) / expected < 0.05

    def test_out_of_range(self):
        s = make_schedule()
        with pytest.raises(ValueError):
            q_sample(np.zeros((1, 2)), [1000], np.zeros((1, 2)), s)
        with pytest.raises(ValueError):
            q_sample(np.zeros((1, 2)), [-1], np.zeros((1, 2)), s)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            q_sample(np.zeros((1, 2)), [0], np.zeros((1, 3)), make_schedule())


class TestDropout:
    def test_no_dropout(self):
        t5, llm = sample_condition_mask(Rng(0), DropoutPolicy(0, 0), 1000)
        assert t5.all() and llm.all()

    def test_always_drop_llm(self):
        t5, llm = sample_condition_mask(Rng(0), DropoutPolicy(1, 0), 1000)
        assert t5.all() and not llm.any()

    def test_always_drop_all(self):
        t5, llm = sample_condition_mask(Rng(0), DropoutPolicy(0, 1), 100)
        assert not t5.any() and not llm.any()

    def test_default_rates(self):
        n = 100_000
        t5, llm = sample_condition_mask(Rng(4), DropoutPolicy(), n)
        for rate, p in ((np.mean(t5 & ~llm), 0.01), (np.mean(~t5), 0.001)):
            assert abs(rate - p) <= 3 * math.sqrt(p * (1 - p) / n)

    def test_never_t5_without_llm_drop(self):
        t5, llm = sample_condition_mask(Rng(5), DropoutPolicy(0.3, 0.3), 5000)
        assert not np.any(~t5 & llm)

    @pytest.mark.parametrize("p", [(-0.1, 0.0), (0.7, 0.6), (0.0, 1.5)])
    def test_invalid(self, p):
        with pytest.raises(ValueError):
            DropoutPolicy(*p)


class TestLoss:
    def test_rigged_model_zero_loss(self):
        z0 = Rng(0).normal((2, *CFG.latent_shape)).astype(np.float32)
        draw = draw_noise(Rng(1), 2, CFG.latent_shape, make_schedule(), DropoutPolicy())
        cond = tiny_dataset().cond.take([0, 1])
        loss = training_loss(lambda z, t, c: Tensor(draw.eps), z0, cond, make_schedule(), draw=draw)
        assert loss.item() == 0.0

    def test_zero_model_unit_loss(self):
        cfg = ModelConfig(channels=4, frames=4, height=8, width=8, hidden=8, heads=2, blocks=1)
        z0 = np.zeros((64, *cfg.latent_shape), np.float32)
        cond = tiny_dataset(cfg, 64).cond
        loss = training_loss(lambda z, t, c: Tensor(np.zeros(z.shape)), z0, cond, make_schedule(), Rng(2))
        # E[eps^2] = 1; std of the mean over 65536 draws is sqrt(2/65536)
        assert abs(loss.item() - 1.0) < 5 * math.sqrt(2 / 65536)

    def test_sampled_gradients(self):
        errors = gradient_errors(max_per_param=1)
        assert max(errors.values()) < 1e-4


class TestGuidance:
    def setup_method(self):
        self.model = inject_llm_branch(init_model(CFG, 0))
        for b in self.model.blocks:
            b.gate.data[...] = 0.5
        self.z, self.t, self.cond = random_probe(CFG, Rng(1), batch=2)
        self.passes = guidance_passes(self.model, self.z, self.t, self.cond)

    def test_telescoping(self):
        out = cfg_epsilon(self.model, self.z, self.t, self.cond, GuidanceScales(1.0, 1.0))
        assert out.tobytes() == self.passes[2].tobytes()

    def test_single_condition(self):
        eu, et, _ = self.passes
        out = cfg_epsilon(self.model, self.z, self.t, self.cond, GuidanceScales(3.0, 0.0))
        assert out.tobytes() == cfg_single(eu, et, 3.0).tobytes()

    def test_unconditional(self):
        out = cfg_epsilon(self.model, self.z, self.t, self.cond, GuidanceScales(0.0, 0.0))
        assert out.tobytes() == self.passes[0].tobytes()

    def test_passes_distinct(self):
        eu, et, ef = self.passes
        assert not np.array_equal(eu, et) and not np.array_equal(et, ef)

    def test_defaults_finite(self):
        out = cfg_epsilon(self.model, self.z, self.t, self.cond, GuidanceScales())
        assert np.all(np.isfinite(out))

    @settings(max_examples=50, deadline=None)
    @given(s_t5=st.floats(0, 20), s_llm=st.floats(0, 20))
    def test_matches_textbook_form(self, s_t5, s_llm):
        eu, et, ef = (p.astype(np.float64) for p in self.passes)
        direct = eu + s_t5 * (et - eu) + s_llm * (ef - et)
        got = combine_guidance(eu, et, ef, GuidanceScales(s_t5, s_llm))
        np.testing.assert_allclose(got, direct, rtol=1e-9, atol=1e-9 * (1 + s_t5 + s_llm))

    def test_nonfinite_scale(self):
        with pytest.raises(ValueError):
            GuidanceScales(float("nan"), 1.0)


class TestDDIM:
    def setup_method(self):
        self.model = inject_llm_branch(init_model(CFG, 0))
        self.cond = tiny_dataset().cond.take([0])

    def test_timesteps(self):
        s = make_schedule()
        ts = ddim_timesteps(50, s)
        assert ts[0] == 999 and ts[-1] == 0 and len(ts) == 50 and np.all(np.diff(ts) < 0)
        assert list(ddim_timesteps(1, s)) == [999]

    def test_bad_steps(self):
        with pytest.raises(ValueError):
            ddim_timesteps(0, make_schedule())
        with pytest.raises(ValueError):
            ddim_timesteps(1001, make_schedule())

    def test_deterministic(self):
        shape = (1, *CFG.latent_shape)
        a = ddim_sample(self.model, shape, self.cond, GuidanceScales(), 4, Rng(7), make_schedule())
        b = ddim_sample(self.model, shape, self.cond, GuidanceScales(), 4, Rng(7), make_schedule())
        assert a.tobytes() == b.tobytes()

    def test_single_step_finite(self):
        out = ddim_sample(self.model, (1, *CFG.latent_shape), self.cond, GuidanceScales(), 1, Rng(0), make_schedule())
        assert out.shape == (1, *CFG.latent_shape) and np.all(np.isfinite(out))


class TestTrainLoop:
    def test_zero_steps_rejected(self):
        with pytest.raises(ValueError):
            train_loop(init_model(CFG, 0), tiny_dataset(), 0, 1e-3, DropoutPolicy(), Rng(0))

    def test_zero_lr_leaves_params(self):
        model = init_model(CFG, 0)
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        train_loop(model, tiny_dataset(), 3, 0.0, DropoutPolicy(), Rng(0), batch_size=2)
        for n, p in model.named_parameters():
            assert p.data.tobytes() == before[n].tobytes(), n

    def test_divergence_reports_step(self):
        model = init_model(CFG, 0)
        model.final.bias.data[0] = np.inf
        with pytest.raises(TrainingDiverged, match="step 0"):
            train_loop(model, tiny_dataset(), 2, 1e-3, DropoutPolicy(), Rng(0), batch_size=2)

    def test_metrics_and_callbacks(self, tmp_path):
        seen = []
        csv = CsvMetrics(tmp_path / "m.csv")
        res = train_loop(init_model(CFG, 0), tiny_dataset(), 3, 1e-3, DropoutPolicy(), Rng(0),
                         callbacks=(csv, lambda m, model: seen.append(m.step)), batch_size=2)
        csv.close()
        assert seen == [0, 1, 2] and len(res.metrics) == 3
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "step,loss,wall_ms" and len(lines) == 4
        assert float(lines[1].split(",")[1]) == pytest.approx(res.metrics[0].loss, rel=1e-8)

    def test_csv_flushed_each_step(self, tmp_path):
        path = tmp_path / "m.csv"
        csv = CsvMetrics(path)
        lengths = []
        train_loop(init_model(CFG, 0), tiny_dataset(), 2, 1e-3, DropoutPolicy(), Rng(0),
                   callbacks=(csv, lambda m, model: lengths.append(len(path.read_text().splitlines()))),
                   batch_size=2)
        csv.close()
        assert lengths == [2, 3]

    def test_reproducible(self):
        runs = []
        for _ in range(2):
            res = train_loop(init_model(CFG, 0), tiny_dataset(), 3, 1e-3, DropoutPolicy(), Rng(9), batch_size=2)
            runs.append([m.loss for m in res.metrics])
        assert runs[0] == runs[1]


class TestContinuity:
    def setup_method(self):
        self.data = tiny_dataset()
        self.model = init_model(CFG, 0)
        train_loop(self.model, self.data, 5, 1e-3, DropoutPolicy(), Rng(0), batch_size=4)
        z0, cond = self.data.batch(np.arange(4))
        self.z0, self.cond = z0, cond
        self.draw = NoiseDraw(np.array([5, 100, 500, 900]),
                              Rng(3).normal((4, *CFG.latent_shape)).astype(np.float32),
                              np.array([True, True, False, True]), np.array([True, False, False, True]))
        self.sched = make_schedule()

    def loss(self, model):
        return training_loss(model, self.z0, self.cond, self.sched, draw=self.draw).item()

    @pytest.mark.parametrize("spec", ["insert:k=1", "insert:k=1/2", "prefix:P=2", "suffix:P=1"])
    def test_expansion(self, spec):
        grown = expand_model(self.model, plan_expansion(2, ExpansionSpec.parse(spec)))
        assert self.loss(grown) == self.loss(self.model)

    def test_injection(self):
        assert self.loss(inject_llm_branch(self.model)) == self.loss(self.model)
