"""Single-image, text-controlled aerial-view synthesis.

Two-stage test-time finetuning of a latent denoiser on an input image and
its perspective remap, mutual-information guided sampling toward the input
latents, and the companion evaluation harness.
"""

from .backends import DenoiserBackend, PretrainedBackend, ToyBackend, add_noise, denoising_loss, make_backend
from .domain import (
    FinetuneSchedule,
    GuidanceConfig,
    ImageBuffer,
    LatentTensor,
    NoiseSchedule,
    TextEmbedding,
    build_target_prompt,
    linear_beta_schedule,
    read_png,
    write_png,
)
from .finetune import FinetuneResult, finetune_adapter, optimize_text_embedding, two_stage_finetune
from .histogram_mi import (
    COMPILED_KERNELS,
    Pdf1D,
    Pdf2D,
    entropy,
    flatten_latents,
    joint_histogram,
    l2_distance,
    l2_gradient,
    mi_gradient,
    mutual_information,
    soft_histogram,
    wasserstein_distance,
    wasserstein_gradient,
)
from .homography import (
    HomographyMatrix,
    IPMConfig,
    compute_ipm,
    compute_rotation_augment,
    dlt_homography,
    ipm_correspondences,
    rotation_homography,
    warp_image,
)
from .metrics import (
    EmbeddingProvider,
    HashEmbeddingProvider,
    MetricReport,
    best_of_k,
    cosine,
    directional_similarity,
    evaluate_dataset,
    image_image_score,
    image_text_score,
)
from .pipeline import ManifestRow, PipelineConfig, RunRecord, load_manifest, run_manifest, run_pipeline
from .sampler import guidance_step, guided_sample, predict_x0

__version__ = "0.1.0"
