import numpy as np
import pytest

from aerialview.backends import ToyBackend, add_noise
from aerialview.domain import (
    GuidanceConfig,
    GuidanceFailureError,
    InvalidInputError,
    LatentTensor,
    NoiseSchedule,
    ScheduleError,
    linear_beta_schedule,
)
from aerialview.histogram_mi import flatten_latents, mutual_information
from aerialview.sampler import (
    guidance_step,
    guided_sample,
    predict_x0,
    sampling_timesteps,
    write_trace_csv,
)

MI_CFG = GuidanceConfig(kind="mi", weight=2.0, num_bins=64)
OFF_CFG = GuidanceConfig(kind="none", weight=0.0)


@pytest.fixture
def z_source(toy_backend, fixture_image):
    return toy_backend.encode_image(fixture_image)


class TestPredictX0:
    def test_alpha_one_returns_zt(self):
        sched = NoiseSchedule(np.array([1.0, 0.5]))
        z = LatentTensor(np.full((1, 1, 1), 3.0))
        eps = LatentTensor(np.full((1, 1, 1), 9.0))
        assert predict_x0(z, eps, 0, sched) == z

    def test_quarter_alpha_doubles(self):
        sched = NoiseSchedule(np.array([1.0, 0.25]))
        z = LatentTensor(np.full((1, 1, 1), 3.0))
        eps = LatentTensor(np.zeros((1, 1, 1)))
        assert predict_x0(z, eps, 1, sched).data[0, 0, 0] == pytest.approx(6.0)

    def test_inverts_add_noise(self):
        rng = np.random.default_rng(0)
        sched = linear_beta_schedule(100)
        z0 = LatentTensor(rng.normal(size=(4, 8, 8)))
        eps = LatentTensor(rng.normal(size=(4, 8, 8)))
        for t in (0, 50, 99):
            z_t = add_noise(z0, eps, t, sched)
            rec = predict_x0(z_t, eps, t, sched)
            assert np.allclose(rec.data, z0.data, atol=1e-12)

    def test_bad_timestep(self):
        sched = linear_beta_schedule(10)
        z = LatentTensor(np.zeros((1, 1, 1)))
        with pytest.raises(ScheduleError):
            predict_x0(z, z, 10, sched)


class TestGuidanceStep:
    def test_zero_weight_identity_object(self, z_source):
        rng = np.random.default_rng(1)
        z = LatentTensor(rng.normal(size=(4, 8, 8)))
        z0 = LatentTensor(rng.normal(size=(4, 8, 8)))
        cfg = GuidanceConfig(kind="mi", weight=0.0)
        assert guidance_step(z, z0, z_source, cfg) is z
        assert guidance_step(z, z0, z_source, OFF_CFG) is z

    def test_small_weight_increases_mi_of_extrapolation(self, toy_backend, z_source):
        rng = np.random.default_rng(2)
        sched = toy_backend.schedule()
        t = 60
        e = toy_backend.encode_text("aerial view, something")
        z_t = LatentTensor(rng.standard_normal((4, 8, 8)))
        eps_hat = toy_backend.predict_noise(z_t, t, e)
        z0 = predict_x0(z_t, eps_hat, t, sched)
        chain = 1.0 / np.sqrt(sched.alpha_bar_at(t))
        mi0 = mutual_information(flatten_latents(z0), flatten_latents(z_source), MI_CFG)
        for weight in (0.05, 0.5, 2.0):
            cfg = GuidanceConfig(kind="mi", weight=weight, num_bins=64)
            z_hat = guidance_step(z_t, z0, z_source, cfg, chain_scale=chain)
            z0_hat = predict_x0(z_hat, eps_hat, t, sched)
            assert mutual_information(flatten_latents(z0_hat),
                                      flatten_latents(z_source), cfg) > mi0

    def test_l2_step_decreases_distance(self, z_source):
        rng = np.random.default_rng(3)
        z0 = LatentTensor(rng.normal(size=(4, 8, 8)))
        cfg = GuidanceConfig(kind="l2", weight=1e-3)
        z_hat = guidance_step(z0, z0, z_source, cfg)
        from aerialview.histogram_mi import l2_distance
        before = l2_distance(flatten_latents(z0), flatten_latents(z_source))
        after = l2_distance(flatten_latents(z_hat), flatten_latents(z_source))
        assert after < before

    def test_overflowing_weight_raises(self, z_source):
        rng = np.random.default_rng(4)
        z = LatentTensor(rng.normal(size=(4, 8, 8)))
        cfg = GuidanceConfig(kind="l2", weight=1e308)
        with pytest.raises(GuidanceFailureError) as exc:
            guidance_step(z, z, z_source, cfg, chain_scale=1e10, step_index=3)
        assert exc.value.step_index == 3


class TestSamplingTimesteps:
    def test_single_step(self):
        assert sampling_timesteps(100, 1).tolist() == [99]

    def test_full_range(self):
        ts = sampling_timesteps(100, 50)
        assert ts[0] == 99 and ts[-1] == 0
        assert np.all(np.diff(ts) < 0)

    def test_bounds_checked(self):
        with pytest.raises(InvalidInputError):
            sampling_timesteps(100, 0)
        with pytest.raises(InvalidInputError):
            sampling_timesteps(100, 101)


class TestGuidedSample:
    def test_guidance_off_equivalence_bit_exact(self, toy_backend, z_source):
        e = toy_backend.encode_text("aerial view, x")
        for kind in ("mi", "l2", "wasserstein"):
            z_a = guided_sample(toy_backend, e, z_source, 10,
                                GuidanceConfig(kind=kind, weight=0.0), seed=5)
            z_b = guided_sample(toy_backend, e, z_source, 10, OFF_CFG, seed=5)
            assert np.array_equal(z_a.data, z_b.data)

    def test_single_step_never_guides(self, toy_backend, z_source):
        e = toy_backend.encode_text("aerial view, x")
        trace: list = []
        guided_sample(toy_backend, e, z_source, 1, MI_CFG, seed=6, trace=trace)
        assert len(trace) == 1
        assert trace[0]["guidance_norm"] == 0.0

    def test_final_step_purity(self, toy_backend, z_source):
        e = toy_backend.encode_text("aerial view, x")
        trace: list = []
        guided_sample(toy_backend, e, z_source, 8, MI_CFG, seed=7, trace=trace)
        assert len(trace) == 8
        assert trace[-1]["guidance_norm"] == 0.0
        assert all(r["guidance_norm"] > 0.0 for r in trace[:-1])

    def test_seed_determinism(self, toy_backend, z_source):
        e = toy_backend.encode_text("aerial view, x")
        z_a = guided_sample(toy_backend, e, z_source, 12, MI_CFG, seed=8)
        z_b = guided_sample(toy_backend, e, z_source, 12, MI_CFG, seed=8)
        assert np.allclose(z_a.data, z_b.data, atol=1e-12)
        z_c = guided_sample(toy_backend, e, z_source, 12, MI_CFG, seed=9)
        assert not np.array_equal(z_a.data, z_c.data)

    def test_cfg_scale_changes_output(self, toy_backend, z_source):
        e = toy_backend.encode_text("aerial view, x")
        z_a = guided_sample(toy_backend, e, z_source, 6, OFF_CFG, cfg_scale=1.0, seed=10)
        z_b = guided_sample(toy_backend, e, z_source, 6, OFF_CFG, cfg_scale=3.0, seed=10)
        assert not np.array_equal(z_a.data, z_b.data)

    def test_trace_csv(self, toy_backend, z_source, tmp_path):
        e = toy_backend.encode_text("aerial view, x")
        trace: list = []
        guided_sample(toy_backend, e, z_source, 4, MI_CFG, seed=11, trace=trace)
        write_trace_csv(trace, tmp_path / "trace.csv")
        lines = (tmp_path / "trace.csv").read_text().splitlines()
        assert lines[0] == "step,timestep,guidance_norm,mi"
        assert len(lines) == 5
