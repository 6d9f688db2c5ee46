"""Fidelity, insertion/deletion AUC, counterfactuals and report emission."""
from .counterfactual import Counterfactual, counterfactual, region_importance, remove_region, salient_regions
from .fidelity import ConfusionCounts, FidelityReport, fidelity, mask_provider, masked_predictions
from .insdel import (
    DEFAULT_FRACTIONS,
    InsDelCurve,
    default_step,
    deletion_auc,
    insdel_curves,
    insertion_auc,
    pixel_order,
    trapezoid_auc,
)
from .pipeline import evaluate_explainer
from .report import EvalResult, emit_report, heat_overlay, ppm_bytes, round9, write_overlays
