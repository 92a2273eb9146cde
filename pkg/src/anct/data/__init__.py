"""Dataset formats, preprocessing, augmentation, folds and the synthetic corpus."""

from .augment import AUGMENTATIONS, FoldSplit, apply_augmentation, augment, make_folds
from .formats import (
    DatasetManifest,
    FormatError,
    ManifestEntry,
    ManifestError,
    NoduleSample,
    NoduleVolume,
    load_dataset,
    load_manifest,
    load_samples,
    load_stats,
    load_volume,
    save_stats,
    save_volume,
    write_manifest,
)
from .preprocess import (
    AIR_HU,
    DegenerateStatsError,
    Window,
    bilinear_resize,
    compute_dataset_stats,
    crop_window,
    normalize_intensity,
    preprocess_crop,
    square_window,
)
from .synth import MALIGNANCY_WEIGHTS, SynthParams, malignancy_from_attributes, synth_generate, synth_sample
