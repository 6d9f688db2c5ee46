"""Beacon world: dark synthetic frames with bright square beacons.

Action 0 is an idle action with no region of interest. Every other action
k owns one cell of a near-square grid laid over the frame; a beacon placed
inside cell k drives action k. Because the background sits below the
policy's brightness gate, the set of pixels that can influence the expert
is known exactly: the annotated beacon pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import GenerationError, UsageError

BACKGROUND = 0.1


@dataclass(frozen=True)
class Beacon:
    action: int
    top: int
    left: int
    size: int
    intensity: float

    def mask(self, height, width):
        m = np.zeros((height, width), dtype=bool)
        m[self.top:self.top + self.size, self.left:self.left + self.size] = True
        return m

    def pixels(self, width):
        """Row-major flat indices covered by the beacon."""
        rows = np.arange(self.top, self.top + self.size)
        cols = np.arange(self.left, self.left + self.size)
        return (rows[:, None] * width + cols[None, :]).ravel()


def region_cells(height, width, n_actions):
    """Cell rectangles ``(top, bottom, left, right)`` for actions 1..K-1."""
    n = n_actions - 1
    if n < 1:
        raise UsageError("beacon world needs K >= 2 (idle plus at least one region)")
    rows = max(1, int(math.isqrt(n)))
    cols = math.ceil(n / rows)
    r_edges = np.linspace(0, height, rows + 1).round().astype(int)
    c_edges = np.linspace(0, width, cols + 1).round().astype(int)
    cells = []
    for k in range(n):
        i, j = divmod(k, cols)
        cells.append((r_edges[i], r_edges[i + 1], c_edges[j], c_edges[j + 1]))
    return cells


def region_map(height, width, n_actions):
    """Per-pixel action id owning that pixel; 0 where no action region exists."""
    out = np.zeros((height, width), dtype=np.int64)
    for k, (t, b, l, r) in enumerate(region_cells(height, width, n_actions), start=1):
        out[t:b, l:r] = k
    return out


@dataclass
class BeaconWorld:
    """Generator parameters plus formulation-only MDP metadata."""

    width: int = 84
    height: int = 84
    n_actions: int = 5
    n_beacons: int = 1
    beacon_size: int = 6
    background: float = BACKGROUND
    intensity_range: tuple = (0.85, 1.0)
    # discount of the underlying MDP; recorded for completeness, never consumed
    gamma: float = 0.99
    max_retries: int = 200
    name: str = field(default="beacon", init=False)

    def __post_init__(self):
        region_cells(self.height, self.width, self.n_actions)
        lo, hi = self.intensity_range
        if not (0.5 < lo <= hi <= 1.0):
            raise UsageError("beacon intensities must lie in (0.5, 1]")

    def params(self):
        return {
            "env": self.name,
            "width": self.width,
            "height": self.height,
            "K": self.n_actions,
            "n_beacons": self.n_beacons,
            "beacon_size": self.beacon_size,
            "background": self.background,
            "intensity_lo": self.intensity_range[0],
            "intensity_hi": self.intensity_range[1],
            "gamma": self.gamma,
        }

    def render(self, beacons):
        img = np.full((1, self.height, self.width), self.background, dtype=np.float32)
        for b in beacons:
            img[0, b.top:b.top + b.size, b.left:b.left + b.size] = b.intensity
        return img

    def sample(self, rng, n_beacons=None):
        """Draw one state and its beacon annotations."""
        n_beacons = self.n_beacons if n_beacons is None else n_beacons
        area = self.beacon_size ** 2
        if n_beacons * area >= self.width * self.height / 4:
            raise GenerationError(
                f"{n_beacons} beacons of {area} px exceed a quarter of the {self.width}x{self.height} frame")
        cells = region_cells(self.height, self.width, self.n_actions)
        # distinct cells first, then reuse cells once every region holds a beacon
        order = list(rng.permutation(len(cells)))
        while len(order) < n_beacons:
            order.extend(rng.permutation(len(cells)))
        occupied = np.zeros((self.height, self.width), dtype=bool)
        beacons = []
        for cell_idx in order[:n_beacons]:
            t, btm, l, r = cells[cell_idx]
            if btm - t < self.beacon_size or r - l < self.beacon_size:
                raise GenerationError(f"beacon of size {self.beacon_size} does not fit region {cells[cell_idx]}")
            for _ in range(self.max_retries):
                top = int(rng.integers(t, btm - self.beacon_size + 1))
                left = int(rng.integers(l, r - self.beacon_size + 1))
                if not occupied[top:top + self.beacon_size, left:left + self.beacon_size].any():
                    break
            else:
                raise GenerationError(f"could not place a beacon in region {cell_idx + 1} "
                                      f"after {self.max_retries} tries")
            occupied[top:top + self.beacon_size, left:left + self.beacon_size] = True
            intensity = float(np.float32(rng.uniform(*self.intensity_range)))
            beacons.append(Beacon(cell_idx + 1, top, left, self.beacon_size, intensity))
        return self.render(beacons), beacons

    def generate(self, seed, n_states):
        """``n_states`` frames ``[n, 1, H, W]`` and their annotations."""
        rng = np.random.default_rng(seed)
        states = np.empty((n_states, 1, self.height, self.width), dtype=np.float32)
        annotations = []
        for i in range(n_states):
            states[i], beacons = self.sample(rng)
            annotations.append(beacons)
        return states, annotations


def beacon_world_generate(seed, n_states, grid=(84, 84), n_beacons=1, K=5, beacon_size=6):
    width, height = grid
    world = BeaconWorld(width=width, height=height, n_actions=K, n_beacons=n_beacons,
                        beacon_size=beacon_size)
    return world.generate(seed, n_states)


def annotation_mask(beacons, height, width):
    m = np.zeros((height, width), dtype=bool)
    for b in beacons:
        m |= b.mask(height, width)
    return m
