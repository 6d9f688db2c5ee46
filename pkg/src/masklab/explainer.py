"""Action-wise saliency explainer, mask algebra and the overlay function."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numeric as nm
from .errors import ContractViolation, DimensionError, FormatError, UsageError
from .numeric import ParamStore, Tensor
from .worlds.dataset import ReferenceValue
from .worlds.policies import kaiming_uniform

CHECKPOINT_MAGIC = b"VMC1"


@dataclass
class MaskSet:
    """K masks ``[K, H, W]`` with values in [0, 1], one per action."""

    masks: np.ndarray

    @property
    def n_actions(self):
        return self.masks.shape[0]

    def __getitem__(self, a):
        return self.masks[a]

    def split(self, action):
        """Active, complement and non-target masks for ``action``."""
        if self.n_actions < 2:
            raise UsageError("need K >= 2 masks to form a non-target mask")
        if not 0 <= action < self.n_actions:
            raise UsageError(f"action {action} outside [0, {self.n_actions})")
        active = self.masks[action]
        rest = np.delete(self.masks, action, axis=0)
        return active, 1.0 - active, rest.max(axis=0)


class ExplainerModel:
    """conv3x3 -> relu -> conv3x3 -> relu -> conv1x1(K) -> sigmoid at full resolution.

    The head is zero-initialised so an untrained model emits 0.5 everywhere.
    """

    def __init__(self, n_actions, height, width, in_channels=1, hidden=8, seed=0):
        if n_actions < 2:
            raise UsageError("explainer needs K >= 2 actions")
        self.n_actions, self.height, self.width = n_actions, height, width
        self.in_channels, self.hidden, self.seed = in_channels, hidden, seed
        rng = np.random.default_rng(seed)
        self.params = ParamStore({
            "conv1.w": Tensor(kaiming_uniform(rng, (hidden, in_channels, 3, 3), in_channels * 9)),
            "conv1.b": Tensor(np.zeros(hidden)),
            "conv2.w": Tensor(kaiming_uniform(rng, (hidden, hidden, 3, 3), hidden * 9)),
            "conv2.b": Tensor(np.zeros(hidden)),
            "head.w": Tensor(np.zeros((n_actions, hidden, 1, 1))),
            "head.b": Tensor(np.zeros(n_actions)),
        })

    def forward(self, x):
        """Mask tensor ``[N, K, H, W]`` for states ``[N, C, H, W]``."""
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, self.height, self.width):
            raise DimensionError(f"explainer expects [N, {self.in_channels}, {self.height}, {self.width}], "
                                 f"got {x.shape}")
        p = self.params
        h = nm.relu(nm.conv2d(x, p["conv1.w"], p["conv1.b"], padding=1))
        h = nm.relu(nm.conv2d(h, p["conv2.w"], p["conv2.b"], padding=1))
        return nm.sigmoid(nm.conv2d(h, p["head.w"], p["head.b"]))

    __call__ = forward

    def masks(self, states, batch_size=64):
        """Numpy masks ``[N, K, H, W]`` without graph recording."""
        states = np.asarray(states, dtype=np.float32)
        out = np.empty((len(states), self.n_actions, self.height, self.width), dtype=np.float32)
        with nm.no_grad():
            for i in range(0, len(states), batch_size):
                out[i:i + batch_size] = self.forward(Tensor(states[i:i + batch_size])).data
        return out

    def config(self):
        return {"K": self.n_actions, "H": self.height, "W": self.width, "C": self.in_channels,
                "hidden": self.hidden, "seed": self.seed}


def explain(model, state):
    """Single forward pass: `MaskSet` for one ``[C, H, W]`` state."""
    state = np.asarray(state, dtype=np.float32)
    if state.ndim != 3:
        raise DimensionError(f"expected a [C, H, W] state, got shape {state.shape}")
    return MaskSet(model.masks(state[None])[0])


# -- batched mask algebra on tensors ---------------------------------------------

def action_selector(actions, n_actions, height, width):
    """Constant one-hot ``[N, K, H, W]`` marking each sample's active channel."""
    actions = np.asarray(actions, dtype=np.int64)
    sel = np.zeros((len(actions), n_actions, height, width), dtype=nm.default_dtype())
    sel[np.arange(len(actions)), actions] = 1.0
    return Tensor(sel)


def split_masks(masks, actions):
    """Active mask, complement and pixel-wise max over inactive masks.

    ``masks`` is a ``[N, K, H, W]`` tensor (or a `MaskSet` with a single
    action), ``actions`` an integer per sample.
    """
    if isinstance(masks, MaskSet):
        return masks.split(int(actions))
    if not isinstance(masks, Tensor):
        masks = Tensor(masks)
    n, k, h, w = masks.shape
    if k < 2:
        raise UsageError("need K >= 2 masks to form a non-target mask")
    actions = np.atleast_1d(actions)
    if len(actions) != n or (actions < 0).any() or (actions >= k).any():
        raise UsageError(f"actions {actions} do not match {n} samples with K={k}")
    sel = action_selector(actions, k, h, w)
    active = nm.reduce_sum(masks * sel, axis=1)
    # active channel pushed to <= -1 so the max always lands on an inactive mask
    non_target = nm.reduce_max(masks - sel * 2.0, axis=1)
    return active, 1.0 - active, non_target


def _reference_tensor(r, shape):
    n, c, h, w = shape
    if isinstance(r, ReferenceValue):
        img = r.image(c, h, w)
    else:
        img = np.asarray(r, dtype=np.float32)
        img = np.broadcast_to(img.reshape(-1, 1, 1) if img.ndim <= 1 else img, (c, h, w))
    return Tensor(np.broadcast_to(img, (n, c, h, w)))


def overlay(s, mask, r):
    """Blend ``s * mask + r * (1 - mask)`` per pixel.

    ``s`` is ``[N, C, H, W]`` (or ``[C, H, W]``), ``mask`` ``[N, H, W]``
    (or ``[H, W]``); tensors keep the graph, numpy inputs return numpy.
    """
    as_numpy = not isinstance(s, Tensor) and not isinstance(mask, Tensor)
    s = s if isinstance(s, Tensor) else Tensor(s)
    mask = mask if isinstance(mask, Tensor) else Tensor(mask)
    single = s.ndim == 3
    if single:
        s = nm.reshape(s, (1,) + s.shape)
        mask = nm.reshape(mask, (1,) + mask.shape)
    n, c, h, w = s.shape
    if mask.shape != (n, h, w):
        raise DimensionError(f"mask shape {mask.shape} does not match state {s.shape}")
    lo, hi = float(mask.data.min()), float(mask.data.max())
    if lo < 0.0 or hi > 1.0 or np.isnan(lo) or np.isnan(hi):
        raise ContractViolation(f"mask values must lie in [0, 1], got [{lo}, {hi}]")
    m = nm.reshape(mask, (n, 1, h, w))
    if c > 1:
        m = nm.concat([m] * c, axis=1)
    out = s * m + _reference_tensor(r, s.shape) * (1.0 - m)
    if single:
        out = nm.reshape(out, (c, h, w))
    return out.data if as_numpy else out


def masked_forward(policy, s, masks, actions, r):
    """Expert distributions on the target-masked and complement-masked states."""
    s = s if isinstance(s, Tensor) else Tensor(s)
    active, complement, _ = split_masks(masks, actions)
    n = s.shape[0]
    both = nm.concat([overlay(s, active, r), overlay(s, complement, r)], axis=0)
    probs = policy(both)
    return probs[:n], probs[n:]


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, params, meta):
    """``VMC1`` + u32 count + (u32 name length, name, VMT1 blob)* + JSON metadata line."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    items = params.items() if isinstance(params, ParamStore) else sorted(params.items())
    buf.write(struct.pack("<I", len(items)))
    for name, t in items:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(nm.tensor_to_bytes(t))
    buf.write(json.dumps(meta, sort_keys=True).encode("utf-8") + b"\n")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path):
    """Return ``(tensors, meta)`` from a checkpoint file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    stream = io.BytesIO(blob)
    if stream.read(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a VMC1 checkpoint")
    (count,) = struct.unpack("<I", stream.read(4))
    tensors = {}
    for _ in range(count):
        (length,) = struct.unpack("<I", stream.read(4))
        name = stream.read(length).decode("utf-8")
        tensors[name] = nm.read_tensor(stream).data
    line = stream.readline()
    try:
        meta = json.loads(line.decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"bad checkpoint metadata in {path}: {exc}") from None
    return tensors, meta


def load_explainer(path):
    tensors, meta = read_checkpoint(path)
    model = ExplainerModel(meta["K"], meta["H"], meta["W"], in_channels=meta.get("C", 1),
                           hidden=meta.get("hidden", 8), seed=meta.get("seed", 0))
    model.params.load_state_dict(tensors)
    return model, meta
