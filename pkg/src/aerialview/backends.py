"""Denoiser backends: the interface, a deterministic desk-scale toy model,
and a wrapper for an external pretrained latent diffusion runtime.

The toy backend keeps every algorithm in this package testable in
milliseconds: its image codec is an orthonormal linear map (so latent
round-trips are exact), its denoiser is a two-layer affine network over
the latents conditioned on a timestep embedding and the mean text token,
and its trainable state is a rank-2 additive adapter on each layer.
"""

from __future__ import annotations

import abc
import hashlib
import os

import numpy as np

from .domain import (
    ImageBuffer,
    InvalidInputError,
    LatentTensor,
    NoiseSchedule,
    ScheduleError,
    TextEmbedding,
    linear_beta_schedule,
)


class PretrainedUnavailableError(RuntimeError):
    """The pretrained runtime or its weights are not present."""


# ---------------------------------------------------------------------------
# Forward process helpers
# ---------------------------------------------------------------------------

def add_noise(z0: LatentTensor, eps: LatentTensor, t: int, sched: NoiseSchedule) -> LatentTensor:
    """Forward-noise z0 with eps at timestep t:
    sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps."""
    if z0.shape != eps.shape:
        raise InvalidInputError(f"shape mismatch: {z0.shape} vs {eps.shape}")
    ab = sched.alpha_bar_at(t)
    return LatentTensor(np.sqrt(ab) * z0.data + np.sqrt(1.0 - ab) * eps.data)


def denoising_loss(backend: "DenoiserBackend", z0: LatentTensor, e: TextEmbedding,
                   t: int, eps: LatentTensor) -> float:
    """Mean squared error between the predicted and true noise at timestep t."""
    z_t = add_noise(z0, eps, t, backend.schedule())
    pred = backend.predict_noise(z_t, t, e)
    d = pred.data - eps.data
    return float(np.mean(d * d))


# ---------------------------------------------------------------------------
# Interface
# ---------------------------------------------------------------------------

class DenoiserBackend(abc.ABC):
    """Latent diffusion model abstraction.

    Base parameters are frozen; only the additive low-rank adapter arrays
    are trainable. With all adapter arrays zero, predict_noise must equal
    the frozen base model's prediction bit-exactly.
    """

    @property
    @abc.abstractmethod
    def latent_shape(self) -> tuple[int, int, int]: ...

    @property
    @abc.abstractmethod
    def image_size(self) -> int: ...

    @abc.abstractmethod
    def encode_text(self, text: str) -> TextEmbedding: ...

    @abc.abstractmethod
    def encode_image(self, img: ImageBuffer) -> LatentTensor: ...

    @abc.abstractmethod
    def decode_latents(self, z: LatentTensor) -> ImageBuffer: ...

    @abc.abstractmethod
    def predict_noise(self, z_t: LatentTensor, t: int, e: TextEmbedding) -> LatentTensor: ...

    @abc.abstractmethod
    def adapter_params(self) -> dict[str, np.ndarray]:
        """Copies of the trainable adapter arrays, keyed by parameter name."""

    @abc.abstractmethod
    def set_adapter_params(self, params: dict[str, np.ndarray]) -> None: ...

    @abc.abstractmethod
    def adapter_layer_names(self) -> tuple[str, ...]: ...

    @abc.abstractmethod
    def schedule(self) -> NoiseSchedule: ...

    @abc.abstractmethod
    def base_fingerprint(self) -> str:
        """Digest of the frozen base parameters (for frozen-base checks)."""

    # Training hooks: loss plus analytic gradients for the two trainable sets.

    @abc.abstractmethod
    def loss_grad_embedding(self, z0: LatentTensor, e: TextEmbedding, t: int,
                            eps: LatentTensor) -> tuple[float, np.ndarray]: ...

    @abc.abstractmethod
    def loss_grad_adapter(self, z0: LatentTensor, e: TextEmbedding, t: int,
                          eps: LatentTensor) -> tuple[float, dict[str, np.ndarray]]: ...

    def zero_adapter(self) -> None:
        self.set_adapter_params({k: np.zeros_like(v) for k, v in self.adapter_params().items()})


# ---------------------------------------------------------------------------
# Toy backend
# ---------------------------------------------------------------------------

LATENT_SHAPE = (4, 8, 8)
_D = 256
_TOKENS, _TOKEN_DIM = 4, 16
_TEMB_DIM = 8
_COND = _TEMB_DIM + _TOKEN_DIM
_HIDDEN = 256
_IMG = 64
_BLOCK = 8
_LAYER_GAIN = 1.15          # per-layer gain on the latent pass-through path
_LATENT_GAIN = 0.5          # image-to-latent scale
_DETAIL_NORM = np.sqrt(192.0)


def _timestep_embedding(t: int, num_steps: int) -> np.ndarray:
    x = 2.0 * np.pi * (t / num_steps)
    freqs = np.array([1.0, 2.0, 4.0, 8.0])
    return np.concatenate([np.sin(freqs * x), np.cos(freqs * x)])


class ToyBackend(DenoiserBackend):
    """Deterministic millisecond-scale backend with a 4x8x8 latent space."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._sched = linear_beta_schedule(100)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, 0xB0DE])))

        w1 = np.zeros((_HIDDEN, _D + _COND))
        w1[:, :_D] = _LAYER_GAIN * np.eye(_D) + rng.normal(0.0, 0.02, (_HIDDEN, _D))
        w1[:, _D:_D + _TEMB_DIM] = rng.normal(0.0, 0.3, (_HIDDEN, _TEMB_DIM))
        w1[:, _D + _TEMB_DIM:] = rng.normal(0.0, 0.9, (_HIDDEN, _TOKEN_DIM))
        self._w1 = w1
        self._b1 = rng.normal(0.0, 0.05, _HIDDEN)
        self._w2 = _LAYER_GAIN * np.eye(_D) + rng.normal(0.0, 0.02, (_D, _HIDDEN))
        self._b2 = rng.normal(0.0, 0.1, _D)

        self._adapter = {
            "layer1.up": np.zeros((_HIDDEN, 2)),
            "layer1.down": rng.normal(0.0, 0.05, (2, _D + _COND)),
            "layer2.up": np.zeros((_D, 2)),
            "layer2.down": rng.normal(0.0, 0.05, (2, _HIDDEN)),
        }

    # -- metadata ----------------------------------------------------------

    @property
    def latent_shape(self):
        return LATENT_SHAPE

    @property
    def image_size(self):
        return _IMG

    def schedule(self) -> NoiseSchedule:
        return self._sched

    def adapter_layer_names(self):
        return ("layer1", "layer2")

    def base_fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self._w1, self._b1, self._w2, self._b2):
            h.update(arr.tobytes())
        return h.hexdigest()

    # -- codecs -------------------------------------------------------------

    def encode_text(self, text: str) -> TextEmbedding:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        words = np.frombuffer(digest, dtype=np.uint32).tolist()
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *words])))
        return TextEmbedding(rng.normal(0.0, 0.5, (_TOKENS, _TOKEN_DIM)))

    def encode_array(self, x: np.ndarray) -> np.ndarray:
        """Orthonormal linear image->latent map on a (64, 64, 3) float array
        of values in [-1, 1]. Channels 0..2 are scaled 8x8 block means, the
        last channel is a per-block horizontal contrast of the summed RGB."""
        blocks = x.reshape(_BLOCK, 8, _BLOCK, 8, 3)
        means = blocks.sum(axis=(1, 3)) / 8.0              # (8, 8, 3), orthonormal rows
        sign = np.repeat(np.array([1.0, -1.0]), 4)
        lum = x.sum(axis=2)                                 # (64, 64)
        detail = (lum.reshape(_BLOCK, 8, _BLOCK, 8) * sign[None, None, None, :]).sum(axis=(1, 3))
        detail /= _DETAIL_NORM
        z = np.concatenate([np.moveaxis(means, 2, 0), detail[None]], axis=0)
        return _LATENT_GAIN * z

    def decode_array(self, z: np.ndarray) -> np.ndarray:
        """Transpose of encode_array; exact right-inverse on latents."""
        z = z / _LATENT_GAIN
        means = np.moveaxis(z[:3], 0, 2)                   # (8, 8, 3)
        x = np.repeat(np.repeat(means, 8, axis=0), 8, axis=1) / 8.0
        sign = np.repeat(np.array([1.0, -1.0]), 4)
        detail = np.repeat(np.repeat(z[3], 8, axis=0), 8, axis=1)
        detail = detail * np.tile(sign, _BLOCK)[None, :] / _DETAIL_NORM
        return x + detail[:, :, None]

    def encode_image(self, img: ImageBuffer) -> LatentTensor:
        if img.height != _IMG or img.width != _IMG:
            raise InvalidInputError(f"toy backend expects {_IMG}x{_IMG} images, got {img.width}x{img.height}")
        x = img.data.astype(np.float64) / 127.5 - 1.0
        return LatentTensor(self.encode_array(x))

    def decode_latents(self, z: LatentTensor) -> ImageBuffer:
        if z.shape != LATENT_SHAPE:
            raise InvalidInputError(f"expected latents {LATENT_SHAPE}, got {z.shape}")
        x = self.decode_array(z.data)
        return ImageBuffer(np.clip(np.rint((x + 1.0) * 127.5), 0, 255).astype(np.uint8))

    # -- denoiser ------------------------------------------------------------

    def _effective_weights(self):
        w1 = self._w1 + self._adapter["layer1.up"] @ self._adapter["layer1.down"]
        w2 = self._w2 + self._adapter["layer2.up"] @ self._adapter["layer2.down"]
        return w1, w2

    def _forward(self, z_t: LatentTensor, t: int, e: TextEmbedding):
        if z_t.shape != LATENT_SHAPE:
            raise InvalidInputError(f"expected latents {LATENT_SHAPE}, got {z_t.shape}")
        if not 0 <= t < self._sched.num_train_steps:
            raise ScheduleError(f"timestep {t} outside [0, {self._sched.num_train_steps})")
        cond = np.concatenate([_timestep_embedding(t, self._sched.num_train_steps),
                               e.data.mean(axis=0)])
        x = np.concatenate([z_t.data.ravel(), cond])
        w1, w2 = self._effective_weights()
        h = w1 @ x + self._b1
        out = w2 @ h + self._b2
        return out, x, h, w1, w2

    def predict_noise(self, z_t: LatentTensor, t: int, e: TextEmbedding) -> LatentTensor:
        out, *_ = self._forward(z_t, t, e)
        return LatentTensor(out.reshape(LATENT_SHAPE))

    # -- adapters -------------------------------------------------------------

    def adapter_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._adapter.items()}

    def set_adapter_params(self, params: dict[str, np.ndarray]) -> None:
        if set(params) != set(self._adapter):
            raise InvalidInputError(f"adapter params must have keys {sorted(self._adapter)}")
        for k, v in params.items():
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != self._adapter[k].shape:
                raise InvalidInputError(f"{k}: expected shape {self._adapter[k].shape}, got {arr.shape}")
            self._adapter[k] = arr.copy()

    # -- training hooks --------------------------------------------------------

    def _loss_and_gout(self, z0, e, t, eps):
        z_t = add_noise(z0, eps, t, self._sched)
        out, x, h, w1, w2 = self._forward(z_t, t, e)
        diff = out - eps.data.ravel()
        loss = float(np.mean(diff * diff))
        g_out = 2.0 * diff / diff.size
        return loss, g_out, x, h, w1, w2

    def loss_grad_embedding(self, z0, e, t, eps):
        loss, g_out, x, h, w1, w2 = self._loss_and_gout(z0, e, t, eps)
        g_h = w2.T @ g_out
        g_x = w1.T @ g_h
        g_tok = g_x[_D + _TEMB_DIM:]
        grad = np.tile(g_tok / _TOKENS, (_TOKENS, 1))
        return loss, grad

    def loss_grad_adapter(self, z0, e, t, eps):
        loss, g_out, x, h, w1, w2 = self._loss_and_gout(z0, e, t, eps)
        g_h = w2.T @ g_out
        grads = {
            "layer2.up": np.outer(g_out, self._adapter["layer2.down"] @ h),
            "layer2.down": np.outer(self._adapter["layer2.up"].T @ g_out, h),
            "layer1.up": np.outer(g_h, self._adapter["layer1.down"] @ x),
            "layer1.down": np.outer(self._adapter["layer1.up"].T @ g_h, x),
        }
        return loss, grads


# ---------------------------------------------------------------------------
# Pretrained backend (optional integration)
# ---------------------------------------------------------------------------

PRETRAINED_ENV = "AERIALVIEW_PRETRAINED_MODEL"


class PretrainedBackend(DenoiserBackend):
    """Wrapper around an external latent diffusion runtime (torch + diffusers).

    Requires the optional `pretrained` extra and a model path in the
    AERIALVIEW_PRETRAINED_MODEL environment variable (or passed explicitly).
    Rank-4 additive adapters are injected on the attention projection
    weights of the UNet; only those are trainable.
    """

    def __init__(self, model_path: str | None = None, device: str = "cpu", rank: int = 4):
        path = model_path or os.environ.get(PRETRAINED_ENV)
        if not path:
            raise PretrainedUnavailableError(
                f"no pretrained weights: set {PRETRAINED_ENV} or pass model_path")
        try:
            import torch
            from diffusers import StableDiffusionPipeline
        except ImportError as exc:
            raise PretrainedUnavailableError(
                "pretrained backend needs the [pretrained] extra (torch, diffusers)") from exc

        self._torch = torch
        self._device = device
        self._rank = rank
        self._pipe = StableDiffusionPipeline.from_pretrained(path).to(device)
        self._pipe.unet.requires_grad_(False)
        self._pipe.vae.requires_grad_(False)
        self._pipe.text_encoder.requires_grad_(False)
        self._inject_adapters()
        ab = self._pipe.scheduler.alphas_cumprod.cpu().numpy().astype(np.float64)
        self._sched = NoiseSchedule(ab, schedule_kind="pretrained")

    # Attention projections get W + up @ down deltas, up zero-initialized.
    def _inject_adapters(self):
        torch = self._torch
        self._adapters: dict[str, tuple] = {}
        for name, module in self._pipe.unet.named_modules():
            if module.__class__.__name__ == "Linear" and any(
                    k in name for k in ("to_q", "to_k", "to_v", "to_out.0")):
                out_f, in_f = module.weight.shape
                up = torch.zeros(out_f, self._rank, device=self._device, requires_grad=True)
                down = torch.randn(self._rank, in_f, device=self._device) * 0.02
                down.requires_grad_(True)
                self._adapters[name] = (module, up, down)
                module._av_up, module._av_down = up, down
                base_forward = module.forward

                def patched(x, _m=module, _f=base_forward):
                    return _f(x) + (x @ _m._av_down.T) @ _m._av_up.T

                module.forward = patched

    @property
    def latent_shape(self):
        ch = self._pipe.unet.config.in_channels
        size = self._pipe.unet.config.sample_size
        return (ch, size, size)

    @property
    def image_size(self):
        return self._pipe.unet.config.sample_size * self._pipe.vae_scale_factor

    def schedule(self):
        return self._sched

    def adapter_layer_names(self):
        return tuple(sorted(self._adapters))

    def base_fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self._pipe.unet.parameters():
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def encode_text(self, text: str) -> TextEmbedding:
        torch = self._torch
        tok = self._pipe.tokenizer(text, padding="max_length",
                                   max_length=self._pipe.tokenizer.model_max_length,
                                   truncation=True, return_tensors="pt")
        with torch.no_grad():
            emb = self._pipe.text_encoder(tok.input_ids.to(self._device))[0][0]
        return TextEmbedding(emb.cpu().numpy().astype(np.float64))

    def encode_image(self, img: ImageBuffer) -> LatentTensor:
        torch = self._torch
        x = torch.from_numpy(img.data.astype(np.float32) / 127.5 - 1.0)
        x = x.permute(2, 0, 1)[None].to(self._device)
        with torch.no_grad():
            z = self._pipe.vae.encode(x).latent_dist.mean * self._pipe.vae.config.scaling_factor
        return LatentTensor(z[0].cpu().numpy().astype(np.float64))

    def decode_latents(self, z: LatentTensor) -> ImageBuffer:
        torch = self._torch
        zt = torch.from_numpy(z.data.astype(np.float32))[None].to(self._device)
        with torch.no_grad():
            x = self._pipe.vae.decode(zt / self._pipe.vae.config.scaling_factor).sample[0]
        arr = ((x.permute(1, 2, 0).cpu().numpy() + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
        return ImageBuffer(arr)

    def _predict(self, z_t: LatentTensor, t: int, e: TextEmbedding, grad: bool):
        torch = self._torch
        zt = torch.from_numpy(z_t.data.astype(np.float32))[None].to(self._device)
        emb = torch.from_numpy(e.data.astype(np.float32))[None].to(self._device)
        ctx = torch.enable_grad() if grad else torch.no_grad()
        with ctx:
            return self._pipe.unet(zt, t, encoder_hidden_states=emb).sample

    def predict_noise(self, z_t, t, e):
        out = self._predict(z_t, t, e, grad=False)
        return LatentTensor(out[0].cpu().numpy().astype(np.float64))

    def adapter_params(self):
        out = {}
        for name, (_, up, down) in self._adapters.items():
            out[f"{name}.up"] = up.detach().cpu().numpy().astype(np.float64)
            out[f"{name}.down"] = down.detach().cpu().numpy().astype(np.float64)
        return out

    def set_adapter_params(self, params):
        torch = self._torch
        for name, (_, up, down) in self._adapters.items():
            with torch.no_grad():
                up.copy_(torch.from_numpy(params[f"{name}.up"].astype(np.float32)))
                down.copy_(torch.from_numpy(params[f"{name}.down"].astype(np.float32)))

    def _loss_tensor(self, z0, e, t, eps):
        torch = self._torch
        sched = self._sched
        ab = sched.alpha_bar_at(t)
        z_t = LatentTensor(np.sqrt(ab) * z0.data + np.sqrt(1.0 - ab) * eps.data)
        pred = self._predict(z_t, t, e, grad=True)
        target = torch.from_numpy(eps.data.astype(np.float32))[None].to(self._device)
        return ((pred - target) ** 2).mean()

    def loss_grad_embedding(self, z0, e, t, eps):
        torch = self._torch
        emb = torch.from_numpy(e.data.astype(np.float32))[None].to(self._device)
        emb.requires_grad_(True)
        zt_ab = self._sched.alpha_bar_at(t)
        z_t = torch.from_numpy(
            (np.sqrt(zt_ab) * z0.data + np.sqrt(1.0 - zt_ab) * eps.data).astype(np.float32)
        )[None].to(self._device)
        pred = self._pipe.unet(z_t, t, encoder_hidden_states=emb).sample
        target = torch.from_numpy(eps.data.astype(np.float32))[None].to(self._device)
        loss = ((pred - target) ** 2).mean()
        loss.backward()
        return float(loss.item()), emb.grad[0].cpu().numpy().astype(np.float64)

    def loss_grad_adapter(self, z0, e, t, eps):
        loss = self._loss_tensor(z0, e, t, eps)
        params = []
        for name, (_, up, down) in self._adapters.items():
            params.extend([(f"{name}.up", up), (f"{name}.down", down)])
        grads_t = self._torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
        grads = {}
        for (name, p), g in zip(params, grads_t):
            grads[name] = (g if g is not None else self._torch.zeros_like(p)).cpu().numpy().astype(np.float64)
        return float(loss.item()), grads


def make_backend(name: str, seed: int = 0) -> DenoiserBackend:
    if name == "toy":
        return ToyBackend(seed=seed)
    if name == "pretrained":
        return PretrainedBackend()
    raise InvalidInputError(f"unknown backend {name!r} (expected 'toy' or 'pretrained')")
