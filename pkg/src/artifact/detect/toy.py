"""Deterministic 1-D interval search with the detector's action semantics.

The lattice is (length, 4, 4), so the y and z extents are pinned at the
minimum and only x moves matter. States are one-hot encoded, which turns a
bias-free linear Q-network into a lookup table.
"""

from __future__ import annotations

import numpy as np

from .env import MIN_EXTENT, Action, BoundingVolume, apply_action, centred_box, dice, step_reward


class IntervalEnv:
    def __init__(self, length: int, target: tuple[int, int]):
        a, b = target
        if not 0 <= a < b <= length:
            raise ValueError(f"target {target} outside [0, {length})")
        self.length = length
        self.lattice = (length, MIN_EXTENT, MIN_EXTENT)
        self.target = BoundingVolume(a, 0, 0, b, MIN_EXTENT, MIN_EXTENT)
        self._index = {}
        for x0 in range(length):
            for x1 in range(x0 + 1, length + 1):
                self._index[(x0, x1)] = len(self._index)

    @property
    def n_states(self) -> int:
        return len(self._index)

    def start(self) -> BoundingVolume:
        return centred_box(self.lattice)

    def observe(self, box: BoundingVolume) -> np.ndarray:
        v = np.zeros(self.n_states, dtype=np.float32)
        v[self._index[(box.x0, box.x1)]] = 1.0
        return v

    def dice(self, box: BoundingVolume) -> float:
        return dice(box, self.target)

    def step(self, box: BoundingVolume, action: int):
        a = Action(action)
        nxt = box if a == Action.TRIGGER else apply_action(box, a, self.lattice)
        return nxt, step_reward(self.dice(box), a, self.dice(nxt))


def edge_target(rng: np.random.Generator, length: int = 40) -> tuple[int, int]:
    """A target interval lying wholly outside the starting box, so the start has Dice 0."""
    start = centred_box((length, MIN_EXTENT, MIN_EXTENT))
    room = start.x0
    if room < MIN_EXTENT:
        raise ValueError(f"length {length} leaves no room outside the start box")
    w = int(rng.integers(MIN_EXTENT, room + 1))
    a = int(rng.integers(0, room - w + 1))
    return (a, a + w) if rng.random() < 0.5 else (length - a - w, length - a)
