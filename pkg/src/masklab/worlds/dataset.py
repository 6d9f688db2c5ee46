"""Expert demonstration datasets and their on-disk directory layout.

Layout of a dataset directory::

    manifest.txt          UTF-8 "key: value" lines
    actions.u32           little-endian u32 action per record
    records/000000.state.vmt, records/000000.dist.vmt, ...
    annotations.txt       optional ground-truth beacons, one record per line
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError, UsageError
from ..numeric import load_tensor, save_tensor
from .beacon import Beacon
from .preprocess import preprocess

SCHEMA_VERSION = 1
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


@dataclass
class ReferenceValue:
    """Per-channel constant used to fill de-emphasized pixels."""

    values: tuple

    def __post_init__(self):
        self.values = tuple(float(v) for v in np.atleast_1d(self.values))
        if any(not 0.0 <= v <= 1.0 for v in self.values):
            raise UsageError(f"reference values must lie in [0, 1], got {self.values}")

    @property
    def channels(self):
        return len(self.values)

    def image(self, channels, height, width):
        vals = self.values if self.channels == channels else self.values[:1] * channels
        if len(vals) != channels:
            raise UsageError(f"reference has {self.channels} channels, state has {channels}")
        return np.broadcast_to(np.asarray(vals, dtype=np.float32)[:, None, None],
                               (channels, height, width)).copy()


def reference_value_for(env, override=None):
    """Background-like reference: the environment's background intensity."""
    if override is not None:
        return ReferenceValue(override)
    background = getattr(env, "background", None)
    if background is None:
        raise UsageError(f"environment {env!r} has no background statistic")
    return ReferenceValue(background)


@dataclass
class Demonstration:
    state: np.ndarray
    action: int
    action_dist: np.ndarray


@dataclass
class Dataset:
    """Demonstrations stored column-wise with an 80/10/10 split."""

    states: np.ndarray
    actions: np.ndarray
    dists: np.ndarray
    split: dict
    seed: int
    meta: dict = field(default_factory=dict)
    annotations: list = None

    def __len__(self):
        return len(self.actions)

    @property
    def n_actions(self):
        return self.dists.shape[1]

    def __getitem__(self, i):
        return Demonstration(self.states[i], int(self.actions[i]), self.dists[i])

    def subset(self, name):
        idx = np.asarray(self.split[name], dtype=np.int64)
        return idx, self.states[idx], self.actions[idx]


def greedy_actions(dists):
    return np.argmax(dists, axis=1).astype(np.int64)


def split_indices(n, seed, fractions=SPLIT_FRACTIONS):
    """Seeded shuffle cut into train/valid/test index lists."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    return {
        "train": sorted(order[:n_train].tolist()),
        "valid": sorted(order[n_train:n_train + n_valid].tolist()),
        "test": sorted(order[n_train + n_valid:].tolist()),
    }


def collect_demonstrations(policy, env, n, seed, size=None):
    """Roll the expert over ``n`` generated states and split the records."""
    if n < 10:
        raise UsageError("need at least 10 demonstrations for an 80/10/10 split")
    raw, annotations = env.generate(seed, n)
    size = size or env.height
    states = np.stack([preprocess(s, size) for s in raw])
    dists = policy.probabilities(states)
    meta = dict(env.params())
    meta["policy"] = policy.kind
    return Dataset(states=states, actions=greedy_actions(dists), dists=dists,
                   split=split_indices(n, seed), seed=seed, meta=meta, annotations=annotations)


# -- directory format -----------------------------------------------------------

def _fmt(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(int(x)) for x in v)
    return str(v)


def save_dataset(ds, path, force=False):
    path = Path(path)
    if (path / "manifest.txt").exists() and not force:
        raise FileExistsError(f"{path} already holds a dataset; pass force to overwrite")
    (path / "records").mkdir(parents=True, exist_ok=True)
    n, c, h, w = ds.states.shape
    lines = {
        "schema_version": SCHEMA_VERSION,
        "count": n,
        "K": ds.n_actions,
        "W": w,
        "H": h,
        "C": c,
        "seed": ds.seed,
        "split_train": ds.split["train"],
        "split_valid": ds.split["valid"],
        "split_test": ds.split["test"],
    }
    for k, v in sorted(ds.meta.items()):
        lines.setdefault(f"meta.{k}", v)
    for i in range(n):
        save_tensor(path / "records" / f"{i:06d}.state.vmt", ds.states[i])
        save_tensor(path / "records" / f"{i:06d}.dist.vmt", ds.dists[i])
    ds.actions.astype("<u4").tofile(path / "actions.u32")
    if ds.annotations is not None:
        with open(path / "annotations.txt", "w", encoding="utf-8") as fh:
            for beacons in ds.annotations:
                fh.write(";".join(f"{b.action},{b.top},{b.left},{b.size},{b.intensity!r}" for b in beacons))
                fh.write("\n")
    tmp = path / "manifest.txt.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for k, v in lines.items():
            fh.write(f"{k}: {_fmt(v)}\n")
    os.replace(tmp, path / "manifest.txt")
    return path


def read_manifest(path):
    manifest = {}
    with open(Path(path) / "manifest.txt", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            key, sep, value = line.partition(": ")
            if not sep:
                key, value = line.rstrip(":"), ""
            manifest[key] = value
    return manifest


def _parse_meta(value):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def load_dataset(path):
    path = Path(path)
    if not (path / "manifest.txt").exists():
        raise FileNotFoundError(f"no dataset manifest in {path}")
    m = read_manifest(path)
    if int(m.get("schema_version", -1)) != SCHEMA_VERSION:
        raise FormatError(f"unsupported dataset schema {m.get('schema_version')!r}")
    n, k = int(m["count"]), int(m["K"])
    c, h, w = int(m["C"]), int(m["H"]), int(m["W"])
    states = np.empty((n, c, h, w), dtype=np.float32)
    dists = np.empty((n, k), dtype=np.float32)
    for i in range(n):
        states[i] = load_tensor(path / "records" / f"{i:06d}.state.vmt").data.reshape(c, h, w)
        dists[i] = load_tensor(path / "records" / f"{i:06d}.dist.vmt").data.reshape(k)
    actions = np.fromfile(path / "actions.u32", dtype="<u4").astype(np.int64)
    if len(actions) != n:
        raise FormatError(f"actions file holds {len(actions)} entries, manifest says {n}")

    def idx(key):
        return [int(x) for x in m.get(key, "").split(",") if x]

    split = {"train": idx("split_train"), "valid": idx("split_valid"), "test": idx("split_test")}
    meta = {key[5:]: _parse_meta(v) for key, v in m.items() if key.startswith("meta.")}
    annotations = None
    if (path / "annotations.txt").exists():
        annotations = []
        with open(path / "annotations.txt", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                beacons = []
                for item in filter(None, line.split(";")):
                    a, t, l, s, inten = item.split(",")
                    beacons.append(Beacon(int(a), int(t), int(l), int(s), float(inten)))
                annotations.append(beacons)
    return Dataset(states=states, actions=actions, dists=dists, split=split, seed=int(m["seed"]),
                   meta=meta, annotations=annotations)
