"""Diffusion-based scratch segmentation with recursive prior conditioning.

The package covers the full desk-scale loop: a synthetic scratch-image
generator, a conditional denoiser, the diffusion forward/reverse machinery,
texture-entropy consistency scoring for pseudo-label gating, a coupled
supervised + semi-supervised trainer, and sliding-window evaluation.
"""

from ._rng import derive_seed, stream
from .data import (
    Dataset,
    DatasetManifest,
    GenConfig,
    SampleRecord,
    apply_geometric,
    augment,
    generate_dataset,
    generate_sample,
    load_dataset,
    normalize_image,
)
from .denoiser import (
    Denoiser,
    DenoiserConfig,
    build_denoiser,
    predict_noise,
    sinusoidal_time_basis,
)
from .diffusion import (
    InferenceResult,
    NoiseSchedule,
    estimate_x0,
    forward_sample,
    make_schedule,
    register_schedule_family,
    reverse_step,
    run_inference,
)
from .metrics import (
    ConfusionCounts,
    MetricReport,
    aggregate,
    confusion,
    evaluate_pair,
    metrics,
    sliding_window_infer,
)
from .supervision import (
    PredictionSequenceSet,
    SupervisionSignal,
    build_sequences,
    entropy_sequences,
    evaluate_sequences,
    loss_mask,
    pseudo_label,
    read_sequence_archive,
    sample_step_subsequence,
    unsupervised_loss,
    write_sequence_archive,
)
from .texture import (
    binarize,
    consistency_feature,
    map_entropy,
    pattern_encode,
    structural_encoding,
    texture_entropy,
)
from .training import (
    CheckpointRecord,
    TrainConfig,
    load_checkpoint,
    pixel_weights,
    predict_probability,
    save_checkpoint,
    supervised_step,
    train,
    unsupervised_step,
    validate,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
