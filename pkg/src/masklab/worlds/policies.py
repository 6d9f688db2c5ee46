"""Frozen expert policies: the analytic beacon policy and a trained tiny CNN."""
from __future__ import annotations

import logging

import numpy as np

from .. import numeric as nm
from ..errors import DimensionError, TrainingFailure, UsageError
from ..numeric import ParamStore, Tensor
from .beacon import region_map

log = logging.getLogger(__name__)


class PolicyModel:
    """Frozen map from ``[N, C, H, W]`` states to ``[N, K]`` action probabilities.

    ``forward`` is differentiable with respect to its input so explainer
    losses can backpropagate through the policy; the policy's own
    parameters never require gradients.
    """

    kind = "abstract"

    def __init__(self, n_actions, params=None):
        self.n_actions = n_actions
        self.params = params if params is not None else ParamStore(frozen=True)
        self.params.freeze()

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def probabilities(self, states, batch_size=512):
        """Numpy convenience: forward in batches with no graph recording."""
        states = np.asarray(states, dtype=np.float32)
        single = states.ndim == 3
        if single:
            states = states[None]
        out = np.empty((len(states), self.n_actions), dtype=np.float32)
        with nm.no_grad():
            for i in range(0, len(states), batch_size):
                out[i:i + batch_size] = self.forward(Tensor(states[i:i + batch_size])).data
        return out[0] if single else out

    def act(self, states):
        """Greedy action; ``np.argmax`` breaks ties toward the lowest index."""
        p = self.probabilities(states)
        return int(np.argmax(p)) if p.ndim == 1 else np.argmax(p, axis=1)

    def config(self):
        return {"kind": self.kind, "K": self.n_actions}


class BeaconPolicy(PolicyModel):
    """Analytic expert for the beacon world.

    Each pixel passes a brightness gate that is 0 at or below ``gate_lo``
    and 1 at or above ``gate_hi`` (linear in between). Action k's logit is
    ``gain`` times the gate-weighted mean brightness of its region, with a
    pseudo-count ``prior`` in the denominator so an empty region scores 0.
    The idle action 0 has no region and a constant logit of 0.
    """

    kind = "analytic-beacon"

    def __init__(self, height, width, n_actions, gain=10.0, gate_lo=0.3, gate_hi=0.5, prior=0.5):
        super().__init__(n_actions)
        self.height, self.width = height, width
        self.gain, self.gate_lo, self.gate_hi, self.prior = gain, gate_lo, gate_hi, prior
        owner = region_map(height, width, n_actions).ravel()
        regions = np.zeros((height * width, n_actions), dtype=np.float32)
        regions[np.arange(owner.size), owner] = 1.0
        regions[:, 0] = 0.0
        self._regions = Tensor(regions)

    @classmethod
    def for_world(cls, world, **kw):
        return cls(world.height, world.width, world.n_actions, **kw)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (self.height, self.width):
            raise DimensionError(f"beacon policy expects [N, 1, {self.height}, {self.width}], got {x.shape}")
        n = x.shape[0]
        flat = nm.reshape(x, (n, self.height * self.width))
        gate = nm.clip((flat - self.gate_lo) * (1.0 / (self.gate_hi - self.gate_lo)), 0.0, 1.0)
        num = nm.matmul(gate * flat, self._regions)
        den = nm.matmul(gate, self._regions) + self.prior
        return nm.softmax((num / den) * self.gain)

    def config(self):
        return {**super().config(), "height": self.height, "width": self.width, "gain": self.gain,
                "gate_lo": self.gate_lo, "gate_hi": self.gate_hi, "prior": self.prior}


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class TinyCNNPolicy(PolicyModel):
    """conv(3x3, s2) -> relu -> conv(3x3, s2) -> relu -> dense -> softmax."""

    kind = "tiny-cnn"

    def __init__(self, height, width, n_actions, channels=(4, 8), seed=0, in_channels=1):
        self.height, self.width, self.in_channels = height, width, in_channels
        self.channels = tuple(channels)
        c1, c2 = self.channels
        h2 = (((height + 1) // 2) + 1) // 2
        w2 = (((width + 1) // 2) + 1) // 2
        rng = np.random.default_rng(seed)
        params = ParamStore({
            "conv1.w": Tensor(kaiming_uniform(rng, (c1, in_channels, 3, 3), in_channels * 9)),
            "conv1.b": Tensor(np.zeros(c1)),
            "conv2.w": Tensor(kaiming_uniform(rng, (c2, c1, 3, 3), c1 * 9)),
            "conv2.b": Tensor(np.zeros(c2)),
            "dense.w": Tensor(kaiming_uniform(rng, (c2 * h2 * w2, n_actions), c2 * h2 * w2)),
            "dense.b": Tensor(np.zeros(n_actions)),
        })
        super().__init__(n_actions, params)
        self._flat = c2 * h2 * w2

    def logits(self, x):
        p = self.params
        h = nm.relu(nm.conv2d(x, p["conv1.w"], p["conv1.b"], stride=2, padding=1))
        h = nm.relu(nm.conv2d(h, p["conv2.w"], p["conv2.b"], stride=2, padding=1))
        h = nm.reshape(h, (x.shape[0], self._flat))
        z = nm.matmul(h, p["dense.w"])
        return z + _tile_rows(p["dense.b"], z.shape[0])

    def forward(self, x):
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, self.height, self.width):
            raise DimensionError(
                f"tiny CNN expects [N, {self.in_channels}, {self.height}, {self.width}], got {x.shape}")
        return nm.softmax(self.logits(x))

    def config(self):
        return {**super().config(), "height": self.height, "width": self.width,
                "channels": list(self.channels)}


def _tile_rows(vec, n):
    """Repeat a [K] tensor into [n, K] with gradient flowing back to it."""
    ones = Tensor(np.ones((n, 1), dtype=vec.data.dtype))
    return nm.matmul(ones, nm.reshape(vec, (1, vec.shape[0])))


def tiny_cnn_policy_train(dataset, epochs=20, seed=0, lr=3e-3, batch_size=32, target=0.95, floor=0.80):
    """Fit a tiny CNN to the dataset's expert actions by cross-entropy.

    Agreement is measured on the validation split only. Returns the frozen
    policy and its validation agreement; raises `TrainingFailure` when the
    agreement stays below ``floor``.
    """
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")
    _, c, h, w = dataset.states.shape
    policy = TinyCNNPolicy(h, w, dataset.n_actions, seed=seed, in_channels=c)
    policy.params.thaw()
    opt = nm.Adam(lr=lr)
    rng = np.random.default_rng(seed)
    train_idx = np.asarray(dataset.split["train"])
    valid_idx = np.asarray(dataset.split["valid"])
    agreement = 0.0
    for epoch in range(epochs):
        order = rng.permutation(train_idx)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            policy.params.zero_grad()
            p = policy.forward(Tensor(dataset.states[idx]))
            onehot = Tensor(np.eye(dataset.n_actions, dtype=np.float32)[dataset.actions[idx]])
            loss = -nm.reduce_mean(nm.reduce_sum(nm.log(p) * onehot, axis=1))
            loss.backward()
            opt.step(policy.params)
        pred = policy.act(dataset.states[valid_idx])
        agreement = float(np.mean(pred == dataset.actions[valid_idx])) if len(valid_idx) else 0.0
        log.info("tiny-cnn epoch %d: loss %.4f valid agreement %.3f", epoch + 1, loss.item(), agreement)
        if agreement >= target:
            break
    if agreement < floor:
        raise TrainingFailure(f"tiny CNN reached only {agreement:.3f} validation agreement "
                              f"(< {floor}); check the environment configuration")
    policy.params.freeze()
    return policy, agreement
