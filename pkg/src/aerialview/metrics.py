"""Evaluation harness: cosine scores over pluggable embedding providers,
directional similarity, best-of-K candidate selection, and dataset reports.

Providers are injected so the metric math is testable with deterministic
stubs; real image-text models plug in through the same interface.
"""

from __future__ import annotations

import abc
import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import (
    ImageBuffer,
    InvalidInputError,
    UndefinedSimilarityError,
    build_target_prompt,
    read_png,
)

METRIC_COLUMNS = ("clip", "a_clip", "sscd", "dino", "clip_i", "clipd", "a_clipd")


class EmbeddingProvider(abc.ABC):
    """Image and text encoder pair producing unit-norm vectors."""

    provider_id: str = "provider"

    @abc.abstractmethod
    def embed_image(self, img: ImageBuffer) -> np.ndarray: ...

    @abc.abstractmethod
    def embed_text(self, text: str) -> np.ndarray: ...


class HashEmbeddingProvider(EmbeddingProvider):
    """Deterministic pseudo-embeddings derived from content digests.

    No semantic meaning, but stable across runs and platforms, which is all
    the selection and report plumbing needs at desk scale.
    """

    def __init__(self, provider_id: str, dim: int = 64):
        self.provider_id = provider_id
        self.dim = dim

    def _vector(self, payload: bytes) -> np.ndarray:
        digest = hashlib.sha256(self.provider_id.encode("utf-8") + payload).digest()
        words = np.frombuffer(digest, dtype=np.uint32).tolist()
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
        v = rng.normal(size=self.dim)
        return v / np.linalg.norm(v)

    def embed_image(self, img: ImageBuffer) -> np.ndarray:
        return self._vector(b"image:" + img.data.tobytes())

    def embed_text(self, text: str) -> np.ndarray:
        return self._vector(b"text:" + text.encode("utf-8"))


class SentenceTransformerProvider(EmbeddingProvider):
    """Optional wrapper over a sentence-transformers CLIP-style model."""

    def __init__(self, model_name: str = "clip-ViT-B-32", provider_id: str = "clip"):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise InvalidInputError("sentence-transformers is not installed") from exc
        self.provider_id = provider_id
        self._model = SentenceTransformer(model_name)

    def _norm(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return v / np.linalg.norm(v)

    def embed_image(self, img: ImageBuffer) -> np.ndarray:
        from PIL import Image
        return self._norm(self._model.encode(Image.fromarray(img.data)))

    def embed_text(self, text: str) -> np.ndarray:
        return self._norm(self._model.encode(text))


def default_providers() -> dict[str, EmbeddingProvider]:
    return {
        "clip": HashEmbeddingProvider("contrastive-language-image"),
        "sscd": HashEmbeddingProvider("copy-detection"),
        "dino": HashEmbeddingProvider("self-distilled"),
    }


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------

def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise UndefinedSimilarityError("cosine of a zero vector is undefined")
    return float(u @ v / (nu * nv))


def image_text_score(provider: EmbeddingProvider, img: ImageBuffer, text: str) -> float:
    return cosine(provider.embed_image(img), provider.embed_text(text))


def image_image_score(provider: EmbeddingProvider, img_a: ImageBuffer, img_b: ImageBuffer) -> float:
    return cosine(provider.embed_image(img_a), provider.embed_image(img_b))


def directional_similarity(provider: EmbeddingProvider, img_src: ImageBuffer,
                           img_tgt: ImageBuffer, text_src: str, text_tgt: str) -> float:
    """Cosine between the image-embedding change and the text-embedding
    change describing the transformation."""
    di = provider.embed_image(img_tgt) - provider.embed_image(img_src)
    dt = provider.embed_text(text_tgt) - provider.embed_text(text_src)
    if np.linalg.norm(di) == 0.0:
        raise UndefinedSimilarityError("identical image embeddings: direction undefined")
    if np.linalg.norm(dt) == 0.0:
        raise UndefinedSimilarityError("identical text embeddings: direction undefined")
    return cosine(di, dt)


def best_of_k(candidates: list[ImageBuffer], input_img: ImageBuffer, caption: str,
              providers: dict[str, EmbeddingProvider],
              view_label: str = "aerial view") -> int:
    """Index of the candidate maximizing text-alignment + copy-detection
    similarity to the input. Ties go to the lowest index."""
    if not candidates:
        raise InvalidInputError("candidate list is empty")
    target = build_target_prompt(view_label, caption)
    scores = [image_text_score(providers["clip"], cand, target)
              + image_image_score(providers["sscd"], cand, input_img)
              for cand in candidates]
    return int(np.argmax(scores))


# ---------------------------------------------------------------------------
# Dataset reports
# ---------------------------------------------------------------------------

def compute_row_metrics(input_img: ImageBuffer, gen_img: ImageBuffer, caption: str,
                        view_label: str, providers: dict[str, EmbeddingProvider]) -> dict[str, float]:
    target = build_target_prompt(view_label, caption)
    return {
        "clip": image_text_score(providers["clip"], gen_img, target),
        "a_clip": image_text_score(providers["clip"], gen_img, view_label),
        "sscd": image_image_score(providers["sscd"], gen_img, input_img),
        "dino": image_image_score(providers["dino"], gen_img, input_img),
        "clip_i": image_image_score(providers["clip"], gen_img, input_img),
        "clipd": directional_similarity(providers["clip"], input_img, gen_img, caption, target),
        "a_clipd": directional_similarity(providers["clip"], input_img, gen_img, caption, view_label),
    }


@dataclass
class MetricReport:
    rows: list[dict]
    means: dict[str, float]

    @classmethod
    def from_rows(cls, rows: list[dict]) -> "MetricReport":
        means = {c: float(np.mean([r[c] for r in rows])) if rows else float("nan")
                 for c in METRIC_COLUMNS}
        return cls(rows=rows, means=means)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", *METRIC_COLUMNS])
            for r in self.rows:
                writer.writerow([r["id"], *(f"{r[c]:.17g}" for c in METRIC_COLUMNS)])
            writer.writerow(["mean", *(f"{self.means[c]:.17g}" for c in METRIC_COLUMNS)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricReport":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["id", *METRIC_COLUMNS]:
                raise InvalidInputError(f"{path}: unexpected report header {header}")
            rows, means = [], {}
            for rec in reader:
                values = {c: float(v) for c, v in zip(METRIC_COLUMNS, rec[1:])}
                if rec[0] == "mean":
                    means = values
                else:
                    rows.append({"id": rec[0], **values})
        return cls(rows=rows, means=means)


def evaluate_dataset(manifest_rows, generated_dir: str | Path,
                     providers: dict[str, EmbeddingProvider]) -> MetricReport:
    """Per-row metrics for generated images named <row id>.png, plus means.
    Aborts up front if any generated image is missing."""
    generated_dir = Path(generated_dir)
    missing = [row.id for row in manifest_rows
               if not (generated_dir / f"{row.id}.png").exists()]
    if missing:
        raise InvalidInputError(f"missing generated images for ids: {', '.join(missing)}")
    out = []
    for row in manifest_rows:
        gen = read_png(generated_dir / f"{row.id}.png")
        inp = read_png(row.image_path)
        metrics = compute_row_metrics(inp, gen, row.caption, row.view_label, providers)
        out.append({"id": row.id, **metrics})
    return MetricReport.from_rows(out)
