"""Run the whole evaluation suite for one explainer over a dataset's test split."""
from __future__ import annotations

import numpy as np

from ..errors import UsageError
from ..parallel import pmap
from .counterfactual import counterfactual
from .fidelity import fidelity, mask_provider
from .insdel import DEFAULT_FRACTIONS, insdel_curves
from .report import EvalResult


def evaluate_explainer(label, provider, policy, dataset, r, fractions=DEFAULT_FRACTIONS, step=None,
                       per_pixel=False, theta=0.5, top_r=3, n_overlays=4, max_samples=None,
                       split="test"):
    """Fidelity, insertion/deletion AUC and counterfactuals on one split."""
    idx, states, actions = dataset.subset(split)
    if max_samples is not None:
        idx, states, actions = idx[:max_samples], states[:max_samples], actions[:max_samples]
    if len(idx) == 0:
        raise UsageError(f"dataset has an empty {split} split")
    get_masks = mask_provider(provider)
    report, counts = fidelity(policy, get_masks, states, actions, r)
    masks = get_masks(states)

    def one(j):
        return insdel_curves(masks[j, actions[j]], states[j], int(actions[j]), policy, r, fractions,
                             step, per_pixel)

    curves = pmap(one, range(len(idx)))
    auc, mean_curves = {}, {}
    for key in curves[0]:
        kind, alpha = key
        auc.setdefault(kind, {})[alpha] = [c[key].auc for c in curves]
        x = curves[0][key].x
        mean_curves.setdefault(kind, {})[alpha] = (x, np.mean([c[key].probs for c in curves], axis=0))

    def cf(j):
        return counterfactual(policy, states[j], masks[j], int(actions[j]), r, theta, top_r)

    cf_rows = []
    for j, found in zip(range(len(idx)), pmap(cf, range(len(idx)))):
        for c in found:
            cf_rows.append({"index": int(idx[j]), **c.summary()})
    overlays = [(int(idx[j]), states[j], masks[j]) for j in range(min(n_overlays, len(idx)))]
    counts_dict = {"tp": counts.tp.tolist(), "tn": counts.tn.tolist(), "fp": counts.fp.tolist(),
                   "fn": counts.fn.tolist(), "total": counts.total}
    return EvalResult(label, report.as_dict(), counts_dict, auc, mean_curves, cf_rows, overlays)
