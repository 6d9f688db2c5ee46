"""Synthetic environments, frozen expert policies and demonstration datasets."""
from .beacon import (
    BACKGROUND,
    Beacon,
    BeaconWorld,
    annotation_mask,
    beacon_world_generate,
    region_cells,
    region_map,
)
from .dataset import (
    Dataset,
    Demonstration,
    ReferenceValue,
    collect_demonstrations,
    greedy_actions,
    load_dataset,
    read_manifest,
    reference_value_for,
    save_dataset,
    split_indices,
)
from .policies import BeaconPolicy, PolicyModel, TinyCNNPolicy, tiny_cnn_policy_train
from .preprocess import preprocess, resize, rgb_to_grayscale


def beacon_policy_forward(policy, state):
    """Probability vector for a single ``[1, H, W]`` state."""
    return policy.probabilities(state)
