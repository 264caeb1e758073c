from .cam import ActivationMap, csr_cam, normalize_map, render_overlay, upsample, weighted_cam
from .metrics import DICE_THRESHOLDS, UndefinedCorrelationError, auc, binarize, dice, pearson_r
from .report import (
    ROBUSTNESS_TRANSFORMS,
    EvalReport,
    dice_sweep,
    evaluate,
    predicted_change,
    render_pair_overlays,
    robustness_sweep,
    write_report,
)
