"""Two-stage test-time finetuning.

Stage A anchors the model on the source image: the text embedding is
optimized against the frozen model, then the adapter weights are trained at
that embedding. Stage B repeats both steps on the perspective-warped image,
starting from the stage-A embedding and continuing from the stage-A adapter
weights. All randomness (timestep and noise draws) flows from the schedule
seed; losses are plain denoising MSE.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backends import DenoiserBackend, denoising_loss
from .checkpoint import save_checkpoint
from .domain import (
    DivergenceError,
    FinetuneSchedule,
    ImageBuffer,
    LatentTensor,
    TextEmbedding,
    write_png,
)
from .homography import IPMConfig, compute_ipm

PROBE_SEED = 1234  # held-out (t, eps) probes, fixed so loss reports are comparable


class Adam:
    """Adaptive-moment gradient descent over a dict of arrays."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1.0 - self.beta1 ** self.t)
            vh = v / (1.0 - self.beta2 ** self.t)
            out[k] = p - self.lr * mh / (np.sqrt(vh) + self.eps)
        return out


def _draw(rng: np.random.Generator, backend: DenoiserBackend) -> tuple[int, LatentTensor]:
    t = int(rng.integers(0, backend.schedule().num_train_steps))
    eps = LatentTensor(rng.standard_normal(backend.latent_shape))
    return t, eps


def optimize_text_embedding(backend: DenoiserBackend, z_target: LatentTensor,
                            e_init: TextEmbedding, iters: int, lr: float,
                            seed: int, on_step=None) -> TextEmbedding:
    """Gradient-descend the text embedding on the denoising loss with the
    model frozen. Backend parameters are untouched."""
    if iters == 0:
        return e_init
    rng = np.random.Generator(np.random.PCG64(seed))
    opt = Adam(lr)
    emb = e_init.data.copy()
    for i in range(iters):
        t, eps = _draw(rng, backend)
        loss, grad = backend.loss_grad_embedding(z_target, TextEmbedding(emb), t, eps)
        if not np.isfinite(loss):
            raise DivergenceError(f"embedding optimization diverged at iteration {i}", iteration=i)
        emb = opt.step({"e": emb}, {"e": grad})["e"]
        if on_step is not None:
            on_step(i, loss)
    return TextEmbedding(emb)


def finetune_adapter(backend: DenoiserBackend, z_target: LatentTensor,
                     e_fixed: TextEmbedding, iters: int, lr: float,
                     seed: int, on_step=None) -> dict[str, np.ndarray]:
    """Train only the adapter arrays at a fixed embedding. The backend is
    updated in place; the returned dict is the final adapter state."""
    if iters == 0:
        return backend.adapter_params()
    rng = np.random.Generator(np.random.PCG64(seed))
    opt = Adam(lr)
    params = backend.adapter_params()
    for i in range(iters):
        t, eps = _draw(rng, backend)
        loss, grads = backend.loss_grad_adapter(z_target, e_fixed, t, eps)
        if not np.isfinite(loss):
            raise DivergenceError(f"adapter finetune diverged at iteration {i}", iteration=i)
        params = opt.step(params, grads)
        backend.set_adapter_params(params)
        if on_step is not None:
            on_step(i, loss)
    return backend.adapter_params()


@dataclass
class FinetuneResult:
    source_embedding: TextEmbedding
    optimized_embedding: TextEmbedding
    warped_embedding: TextEmbedding
    adapter: dict[str, np.ndarray]
    warped_image: ImageBuffer
    loss_curves: dict[str, list[tuple[int, float]]] = field(default_factory=dict)


def two_stage_finetune(backend: DenoiserBackend, image: ImageBuffer, caption: str,
                       ipm_cfg: IPMConfig, sched: FinetuneSchedule,
                       stage_b_image: ImageBuffer | None = None) -> FinetuneResult:
    """Run both finetune stages on one image and its warped counterpart.

    stage_b_image overrides the perspective remap (used by the rotation
    augmentation ablation); None computes it from ipm_cfg.
    """
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(sched.seed).spawn(4)]
    curves: dict[str, list[tuple[int, float]]] = {
        "stage_a_embed": [], "stage_a_adapter": [],
        "stage_b_embed": [], "stage_b_adapter": [],
    }

    def recorder(key):
        return lambda i, loss: curves[key].append((i, loss))

    def run_stage(stage, fn, *args, on_step):
        try:
            return fn(*args, on_step=on_step)
        except DivergenceError as exc:
            exc.stage = stage
            raise

    source_embedding = backend.encode_text(caption)
    z_source = backend.encode_image(image)
    warped = stage_b_image if stage_b_image is not None else compute_ipm(image, ipm_cfg)
    z_warped = backend.encode_image(warped)

    optimized = run_stage(
        "stage_a_embed", optimize_text_embedding, backend, z_source, source_embedding,
        sched.stage_a_embed_iters, sched.stage_a_embed_lr, seeds[0],
        on_step=recorder("stage_a_embed"))
    run_stage(
        "stage_a_adapter", finetune_adapter, backend, z_source, optimized,
        sched.stage_a_adapter_iters, sched.stage_a_adapter_lr, seeds[1],
        on_step=recorder("stage_a_adapter"))
    warped_embedding = run_stage(
        "stage_b_embed", optimize_text_embedding, backend, z_warped, optimized,
        sched.stage_b_embed_iters, sched.stage_a_embed_lr, seeds[2],
        on_step=recorder("stage_b_embed"))
    adapter = run_stage(
        "stage_b_adapter", finetune_adapter, backend, z_warped, warped_embedding,
        sched.stage_b_adapter_iters, sched.stage_a_adapter_lr, seeds[3],
        on_step=recorder("stage_b_adapter"))

    return FinetuneResult(source_embedding, optimized, warped_embedding,
                          adapter, warped, curves)


# ---------------------------------------------------------------------------
# Held-out probes for comparable loss reporting
# ---------------------------------------------------------------------------

def make_probe_set(backend: DenoiserBackend, count: int = 64,
                   seed: int = PROBE_SEED) -> list[tuple[int, LatentTensor]]:
    rng = np.random.Generator(np.random.PCG64(seed))
    return [_draw(rng, backend) for _ in range(count)]


def evaluate_probes(backend: DenoiserBackend, z_target: LatentTensor,
                    e: TextEmbedding, probes) -> float:
    return float(np.mean([denoising_loss(backend, z_target, e, t, eps)
                          for t, eps in probes]))


# ---------------------------------------------------------------------------
# Artifact persistence (run directory layout)
# ---------------------------------------------------------------------------

def save_finetune_artifacts(run_dir: str | Path, result: FinetuneResult,
                            adapter_layers: tuple[str, ...]) -> list[str]:
    """Write e_opt.bin, e_H.bin, adapter.ckpt, ipm.png and loss_curves.csv;
    returns the relative file names written."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run_dir / "e_opt.bin",
                    {"embedding": result.optimized_embedding.data}, dtype="<f8")
    save_checkpoint(run_dir / "e_H.bin",
                    {"embedding": result.warped_embedding.data}, dtype="<f8")
    save_checkpoint(run_dir / "adapter.ckpt", result.adapter,
                    adapter_layers=adapter_layers, dtype="<f4")
    write_png(result.warped_image, run_dir / "ipm.png")
    with open(run_dir / "loss_curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "iteration", "loss"])
        for stage, rows in result.loss_curves.items():
            for i, loss in rows:
                writer.writerow([stage, i, f"{loss:.17g}"])
    return ["e_opt.bin", "e_H.bin", "adapter.ckpt", "ipm.png", "loss_curves.csv"]
