"""Core value types and configuration shared by every stage of the pipeline.

All types here are immutable: arrays are copied on construction and marked
read-only, so instances can be shared freely between threads.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class DegenerateGeometryError(ValueError):
    """Point correspondences or a transform matrix are geometrically singular."""


class ScheduleError(ValueError):
    """A noise schedule is malformed or queried outside its valid range."""


class UnsupportedGradientError(ValueError):
    """A gradient was requested for a non-differentiable configuration."""


class UndefinedSimilarityError(ValueError):
    """A similarity score is undefined (zero vector or zero difference)."""


class DivergenceError(RuntimeError):
    """An optimization loop produced a non-finite loss."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class GuidanceFailureError(RuntimeError):
    """A guidance gradient came back non-finite during sampling."""

    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message)
        self.step_index = step_index


def _freeze(obj, name, arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    object.__setattr__(obj, name, arr)


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """8-bit RGB image, row-major (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.uint8)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise InvalidInputError(f"image data must have shape (h, w, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidInputError("image dimensions must be positive")
        _freeze(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    def __eq__(self, other):
        return isinstance(other, ImageBuffer) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LatentTensor:
    """Real-valued latent grid, shape (channels, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise InvalidInputError(f"latents must have shape (c, h, w), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("latents contain non-finite values")
        _freeze(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        return isinstance(other, LatentTensor) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    """Sequence of token vectors, shape (tokens, dim)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise InvalidInputError(f"embedding must have shape (tokens, dim), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("embedding contains non-finite values")
        _freeze(self, "data", arr)

    @property
    def tokens(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        return isinstance(other, TextEmbedding) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Cumulative signal-retention curve alpha_bar over the training timesteps.

    alpha_bar must be strictly decreasing with every entry in (0, 1].
    """

    alpha_bar: np.ndarray
    schedule_kind: str = "linear-beta"

    def __post_init__(self):
        arr = np.asarray(self.alpha_bar, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ScheduleError("alpha_bar must be a non-empty 1-d array")
        if arr[0] > 1.0:
            raise ScheduleError("alpha_bar[0] must be <= 1")
        if np.any(arr <= 0.0):
            raise ScheduleError("alpha_bar entries must be > 0")
        if arr.size > 1 and np.any(np.diff(arr) >= 0.0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        _freeze(self, "alpha_bar", arr)

    @property
    def num_train_steps(self) -> int:
        return self.alpha_bar.size

    def alpha_bar_at(self, t: int) -> float:
        if not 0 <= t < self.num_train_steps:
            raise ScheduleError(f"timestep {t} outside [0, {self.num_train_steps})")
        return float(self.alpha_bar[t])

    def __eq__(self, other):
        return (
            isinstance(other, NoiseSchedule)
            and self.schedule_kind == other.schedule_kind
            and np.array_equal(self.alpha_bar, other.alpha_bar)
        )


def linear_beta_schedule(num_steps: int, beta_start: float = 1e-3, beta_end: float = 0.12) -> NoiseSchedule:
    betas = np.linspace(beta_start, beta_end, num_steps)
    return NoiseSchedule(np.cumprod(1.0 - betas), schedule_kind="linear-beta")


@dataclass(frozen=True)
class FinetuneSchedule:
    """Per-stage iteration counts and learning rates for the two finetune stages.

    Stage A targets the source image, stage B its perspective-warped variant.
    Stage B reuses the stage-A learning rates.
    """

    stage_a_embed_iters: int = 1000
    stage_a_embed_lr: float = 1e-3
    stage_a_adapter_iters: int = 500
    stage_a_adapter_lr: float = 2e-4
    stage_b_embed_iters: int = 500
    stage_b_adapter_iters: int = 250
    seed: int = 0

    def __post_init__(self):
        for name in ("stage_a_embed_iters", "stage_a_adapter_iters",
                     "stage_b_embed_iters", "stage_b_adapter_iters"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be >= 0")
        for name in ("stage_a_embed_lr", "stage_a_adapter_lr"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be > 0")


GUIDANCE_KINDS = ("mi", "l2", "wasserstein", "none")


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance functional selection plus histogram settings.

    weight is the guidance strength (lambda). soft_bandwidth is the Gaussian
    kernel bandwidth in units of one bin width; 0 selects hard binning, which
    is valid for histogram and distance evaluation but has no usable gradient.
    value_range is a fixed (lo, hi) pair, or None to use the min/max of the
    union of both inputs per call.
    """

    kind: str = "mi"
    weight: float = 1e-6
    num_bins: int = 64
    soft_bandwidth: float = 0.5
    value_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in GUIDANCE_KINDS:
            raise InvalidInputError(f"guidance kind must be one of {GUIDANCE_KINDS}, got {self.kind!r}")
        if self.weight < 0:
            raise InvalidInputError("guidance weight must be >= 0")
        if self.num_bins < 2:
            raise InvalidInputError("num_bins must be >= 2")
        if self.soft_bandwidth < 0:
            raise InvalidInputError("soft_bandwidth must be >= 0 (0 = hard binning)")
        if self.value_range is not None:
            lo, hi = self.value_range
            if not hi > lo:
                raise InvalidInputError("fixed value_range needs hi > lo")
            object.__setattr__(self, "value_range", (float(lo), float(hi)))


# ---------------------------------------------------------------------------
# Prompt construction
# ---------------------------------------------------------------------------

def build_target_prompt(view_label: str, caption: str) -> str:
    """Compose the generation prompt as '<view label>, <caption>'."""
    if not caption:
        raise InvalidInputError("caption must be non-empty")
    if not view_label:
        raise InvalidInputError("view_label must be non-empty")
    return f"{view_label}, {caption}"


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def read_png(path: str | Path) -> ImageBuffer:
    with Image.open(path) as im:
        return ImageBuffer(np.asarray(im.convert("RGB")))


def write_png(img: ImageBuffer, path: str | Path) -> None:
    Image.fromarray(img.data, mode="RGB").save(path, format="PNG")


def png_bytes(img: ImageBuffer) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img.data, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# JSON round-trips for the config-like types
# ---------------------------------------------------------------------------

def to_json_dict(obj) -> dict:
    if isinstance(obj, NoiseSchedule):
        return {"type": "NoiseSchedule", "alpha_bar": obj.alpha_bar.tolist(),
                "schedule_kind": obj.schedule_kind}
    if isinstance(obj, FinetuneSchedule):
        return {"type": "FinetuneSchedule",
                "stage_a_embed_iters": obj.stage_a_embed_iters,
                "stage_a_embed_lr": obj.stage_a_embed_lr,
                "stage_a_adapter_iters": obj.stage_a_adapter_iters,
                "stage_a_adapter_lr": obj.stage_a_adapter_lr,
                "stage_b_embed_iters": obj.stage_b_embed_iters,
                "stage_b_adapter_iters": obj.stage_b_adapter_iters,
                "seed": obj.seed}
    if isinstance(obj, GuidanceConfig):
        return {"type": "GuidanceConfig", "kind": obj.kind, "weight": obj.weight,
                "num_bins": obj.num_bins, "soft_bandwidth": obj.soft_bandwidth,
                "value_range": list(obj.value_range) if obj.value_range else None}
    raise TypeError(f"no JSON form for {type(obj).__name__}")


def from_json_dict(d: dict):
    kind = d.get("type")
    if kind == "NoiseSchedule":
        return NoiseSchedule(np.array(d["alpha_bar"]), d["schedule_kind"])
    if kind == "FinetuneSchedule":
        return FinetuneSchedule(**{k: v for k, v in d.items() if k != "type"})
    if kind == "GuidanceConfig":
        vr = d["value_range"]
        return GuidanceConfig(d["kind"], d["weight"], d["num_bins"],
                              d["soft_bandwidth"], tuple(vr) if vr else None)
    raise TypeError(f"unknown type tag {kind!r}")


def to_json(obj) -> str:
    return json.dumps(to_json_dict(obj), sort_keys=True)


def from_json(text: str):
    return from_json_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Flat key=value config files
# ---------------------------------------------------------------------------

def parse_config_file(path: str | Path) -> dict[str, str]:
    """Parse a flat `key = value` config file. '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
