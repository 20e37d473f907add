"""Audit toolkit for image-age classifiers.

Builds average-image probes of a trained classifier to separate genuine
age-trace inference from image-content bias, and ships a synthetic
age-signal pipeline plus a small trainable reference classifier so the full
protocol runs end-to-end without external data.
"""

from .audit import (
    AuditConfig,
    AuditReport,
    RunResult,
    delta_binary,
    delta_general,
    evaluate_on_average_images,
    interpret_report,
    run_audit,
)
from .avg import (
    AverageVariant,
    AveragingSet,
    average_color,
    average_image,
    build_variants,
    filtered_average,
    range_image,
    sample_averaging_sets,
)
from .core import (
    Image,
    LabeledDataset,
    DatasetItem,
    Rng,
    load_dataset_dir,
    load_float_raster,
    load_image,
    save_float_raster,
    save_png,
    split_dataset,
)
from .filters import (
    FilterBank,
    Kernel,
    apply_filter_bank,
    median_filter,
    project_constrained_kernel,
    residual_transform,
    srm_filter_bank,
)
from .learn import (
    Classifier,
    ExternalClassifier,
    FusedTinyNetClassifier,
    ModelSpec,
    PatchSpec,
    TinyNet,
    TinyNetArch,
    TrainConfig,
    adamax_step,
    extract_blocks_48,
    extract_five_crops,
    external_classifier,
    fit_classifier,
    fuse_predictions,
    sgd_momentum_step,
    train_tinynet,
)
from .sensor import (
    AgeSignal,
    CaptureParams,
    Defect,
    DefectMap,
    detect_strong_defects,
    embed_age_signal,
    estimate_age_signal,
    generate_synthetic_dataset,
    mirror_expand,
    simulate_dark_frame,
)

__version__ = "0.1.0"
