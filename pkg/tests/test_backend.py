import numpy as np
import pytest

from aerialview.backends import ToyBackend, add_noise, denoising_loss, make_backend
from aerialview.checkpoint import load_checkpoint, save_checkpoint
from aerialview.domain import (
    ImageBuffer,
    InvalidInputError,
    LatentTensor,
    NoiseSchedule,
    TextEmbedding,
    linear_beta_schedule,
)


class TestAddNoise:
    def test_alpha_bar_one_returns_z0(self):
        sched = NoiseSchedule(np.array([1.0, 0.5]))
        z0 = LatentTensor(np.full((1, 1, 1), 3.0))
        eps = LatentTensor(np.full((1, 1, 1), 7.0))
        assert add_noise(z0, eps, 0, sched) == z0

    def test_quarter_alpha_scalar(self):
        sched = NoiseSchedule(np.array([1.0, 0.25]))
        z0 = LatentTensor(np.full((1, 1, 1), 2.0))
        eps = LatentTensor(np.zeros((1, 1, 1)))
        assert add_noise(z0, eps, 1, sched).data[0, 0, 0] == pytest.approx(1.0)

    def test_shape_mismatch(self):
        sched = linear_beta_schedule(10)
        with pytest.raises(InvalidInputError):
            add_noise(LatentTensor(np.zeros((1, 2, 2))), LatentTensor(np.zeros((1, 2, 3))), 0, sched)

    def test_invertible_with_known_eps(self):
        # add then algebraically invert recovers z0 exactly when eps is known
        rng = np.random.default_rng(0)
        sched = linear_beta_schedule(100)
        z0 = rng.normal(size=(4, 8, 8))
        eps = rng.normal(size=(4, 8, 8))
        for t in (0, 37, 99):
            ab = sched.alpha_bar_at(t)
            z_t = add_noise(LatentTensor(z0), LatentTensor(eps), t, sched)
            rec = (z_t.data - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
            assert np.allclose(rec, z0, atol=1e-12)


class _PerfectBackend(ToyBackend):
    """Predicts the exact noise (test double for the loss contract)."""

    def __init__(self, eps):
        super().__init__(seed=0)
        self._eps = eps

    def predict_noise(self, z_t, t, e):
        return self._eps


class _ZeroBackend(ToyBackend):
    def predict_noise(self, z_t, t, e):
        return LatentTensor(np.zeros(self.latent_shape))


class TestDenoisingLoss:
    def test_perfect_predictor_zero_loss(self, toy_backend):
        rng = np.random.default_rng(1)
        eps = LatentTensor(rng.normal(size=(4, 8, 8)))
        b = _PerfectBackend(eps)
        z0 = LatentTensor(rng.normal(size=(4, 8, 8)))
        e = b.encode_text("x")
        assert denoising_loss(b, z0, e, 42, eps) == 0.0

    def test_zero_predictor_loss_is_mean_square_eps(self):
        rng = np.random.default_rng(2)
        eps_arr = rng.normal(size=(4, 8, 8))
        b = _ZeroBackend(seed=0)
        z0 = LatentTensor(rng.normal(size=(4, 8, 8)))
        loss = denoising_loss(b, z0, b.encode_text("x"), 10, LatentTensor(eps_arr))
        assert loss == pytest.approx(np.mean(eps_arr ** 2), rel=1e-12)

    def test_nonnegative(self, toy_backend):
        rng = np.random.default_rng(3)
        z0 = LatentTensor(rng.normal(size=(4, 8, 8)))
        eps = LatentTensor(rng.normal(size=(4, 8, 8)))
        assert denoising_loss(toy_backend, z0, toy_backend.encode_text("y"), 5, eps) >= 0.0


class TestToyBackend:
    def test_determinism_across_instances(self):
        a, b = ToyBackend(seed=9), ToyBackend(seed=9)
        rng = np.random.default_rng(4)
        z = LatentTensor(rng.normal(size=(4, 8, 8)))
        e = a.encode_text("hello")
        assert np.allclose(a.predict_noise(z, 3, e).data,
                           b.predict_noise(z, 3, e).data, atol=1e-12)
        assert a.encode_text("hello") == b.encode_text("hello")
        assert a.base_fingerprint() == b.base_fingerprint()

    def test_different_seeds_differ(self):
        assert ToyBackend(0).base_fingerprint() != ToyBackend(1).base_fingerprint()

    def test_prediction_shape(self, toy_backend):
        rng = np.random.default_rng(5)
        z = LatentTensor(rng.normal(size=(4, 8, 8)))
        out = toy_backend.predict_noise(z, 0, toy_backend.encode_text("t"))
        assert out.shape == z.shape

    def test_zero_adapter_reproduces_base_bit_exact(self, toy_backend):
        rng = np.random.default_rng(6)
        z = LatentTensor(rng.normal(size=(4, 8, 8)))
        e = toy_backend.encode_text("t")
        toy_backend.zero_adapter()
        before = toy_backend.predict_noise(z, 7, e)
        params = toy_backend.adapter_params()
        params = {k: v + np.random.default_rng(7).normal(0, 0.1, v.shape) for k, v in params.items()}
        toy_backend.set_adapter_params(params)
        perturbed = toy_backend.predict_noise(z, 7, e)
        assert not np.array_equal(perturbed.data, before.data)
        toy_backend.zero_adapter()
        after = toy_backend.predict_noise(z, 7, e)
        assert np.array_equal(after.data, before.data)

    def test_codec_latent_round_trip_exact(self, toy_backend):
        rng = np.random.default_rng(8)
        z = rng.normal(size=(4, 8, 8))
        assert np.allclose(toy_backend.encode_array(toy_backend.decode_array(z)), z, atol=1e-12)

    def test_decode_preserves_image_dims(self, toy_backend, fixture_image):
        z = toy_backend.encode_image(fixture_image)
        img = toy_backend.decode_latents(z)
        assert (img.width, img.height) == (fixture_image.width, fixture_image.height)

    def test_embedding_gradient_matches_fd(self, toy_backend):
        rng = np.random.default_rng(9)
        z0 = LatentTensor(rng.normal(size=(4, 8, 8)))
        eps = LatentTensor(rng.normal(size=(4, 8, 8)))
        e = toy_backend.encode_text("check")
        loss, grad = toy_backend.loss_grad_embedding(z0, e, 30, eps)
        h = 1e-6
        base = e.data.copy()
        for idx in [(0, 0), (1, 5), (3, 15)]:
            ep = base.copy(); ep[idx] += h
            em = base.copy(); em[idx] -= h
            lp = denoising_loss(toy_backend, z0, TextEmbedding(ep), 30, eps)
            lm = denoising_loss(toy_backend, z0, TextEmbedding(em), 30, eps)
            assert grad[idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-5, abs=1e-9)

    def test_adapter_gradient_matches_fd(self, toy_backend):
        rng = np.random.default_rng(10)
        z0 = LatentTensor(rng.normal(size=(4, 8, 8)))
        eps = LatentTensor(rng.normal(size=(4, 8, 8)))
        e = toy_backend.encode_text("check")
        loss, grads = toy_backend.loss_grad_adapter(z0, e, 60, eps)
        h = 1e-6
        params = toy_backend.adapter_params()
        for key, idx in [("layer1.up", (3, 1)), ("layer1.down", (0, 10)),
                         ("layer2.up", (100, 0)), ("layer2.down", (1, 33))]:
            pp = {k: v.copy() for k, v in params.items()}
            pp[key][idx] += h
            toy_backend.set_adapter_params(pp)
            lp = denoising_loss(toy_backend, z0, e, 60, eps)
            pm = {k: v.copy() for k, v in params.items()}
            pm[key][idx] -= h
            toy_backend.set_adapter_params(pm)
            lm = denoising_loss(toy_backend, z0, e, 60, eps)
            toy_backend.set_adapter_params(params)
            assert grads[key][idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-4, abs=1e-9)

    def test_make_backend(self):
        assert isinstance(make_backend("toy", seed=2), ToyBackend)
        with pytest.raises(InvalidInputError):
            make_backend("imaginary")


class TestCheckpointFormat:
    def test_round_trip_float32(self, tmp_path):
        rng = np.random.default_rng(11)
        arrays = {"layer1.up": rng.normal(size=(8, 2)).astype(np.float32).astype(np.float64),
                  "layer1.down": rng.normal(size=(2, 16)).astype(np.float32).astype(np.float64)}
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, arrays, adapter_layers=("layer1",))
        loaded, header = load_checkpoint(path)
        assert header["adapter_layers"] == ["layer1"]
        for k in arrays:
            assert np.array_equal(loaded[k], arrays[k])

    def test_little_endian_float32_layout(self, tmp_path):
        path = tmp_path / "b.ckpt"
        save_checkpoint(path, {"w": np.array([1.0, 2.0])})
        raw = path.read_bytes()
        assert raw[:4] == b"AVCP"
        assert raw[-8:] == np.array([1.0, 2.0], dtype="<f4").tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "c.ckpt"
        path.write_bytes(b"JUNKxxxx")
        with pytest.raises(InvalidInputError):
            load_checkpoint(path)

    def test_adapter_checkpoint_round_trip(self, toy_backend, tmp_path):
        params = toy_backend.adapter_params()
        path = tmp_path / "adapter.ckpt"
        save_checkpoint(path, params, adapter_layers=toy_backend.adapter_layer_names())
        loaded, header = load_checkpoint(path)
        assert set(loaded) == set(params)
        assert header["adapter_layers"] == ["layer1", "layer2"]
        toy_backend.set_adapter_params(loaded)
