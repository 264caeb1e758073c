from .augment import AugmentParams, AugmentRanges, augment
from .dataset import (
    LongitudinalDataset,
    LongitudinalSample,
    PairBatch,
    sample_pairs,
    split_subjects,
)
from .io import load_dataset, load_manifest, save_dataset
from .synth import (
    StarmenConfig,
    TumorConfig,
    generate_starmen,
    generate_tumor,
    pair_change_mask,
)
