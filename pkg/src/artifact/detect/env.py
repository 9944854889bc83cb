"""Bounding-volume search environment: boxes, actions, Dice rewards, embeddings."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from ..grad import AdamState, NetworkSpec, ParameterSet, adam_step, backward, forward, init_params, no_grad
from ..grad import layers as L
from ..grad import presets

log = logging.getLogger(__name__)

MIN_EXTENT = 4
ETA = 10.0
TRIGGER_DICE = 0.2


class BoundingVolume(NamedTuple):
    """Half-open voxel box ``[x0, x1) x [y0, y1) x [z0, z1)``."""

    x0: int
    y0: int
    z0: int
    x1: int
    y1: int
    z1: int

    @property
    def lo(self) -> tuple[int, int, int]:
        return (self.x0, self.y0, self.z0)

    @property
    def hi(self) -> tuple[int, int, int]:
        return (self.x1, self.y1, self.z1)

    @property
    def extent(self) -> tuple[int, int, int]:
        return (self.x1 - self.x0, self.y1 - self.y0, self.z1 - self.z0)

    @property
    def volume(self) -> int:
        return int(np.prod(self.extent))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    def valid(self, lattice=None) -> bool:
        ok = all(a < b for a, b in zip(self.lo, self.hi))
        if lattice is not None:
            ok = ok and all(a >= 0 for a in self.lo) and all(b <= n for b, n in zip(self.hi, lattice))
        return ok

    def rasterize(self, lattice) -> np.ndarray:
        m = np.zeros(lattice, dtype=bool)
        m[self.slices] = True
        return m

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> BoundingVolume:
        idx = np.argwhere(mask)
        if idx.size == 0:
            raise ValueError("empty mask has no bounding volume")
        lo, hi = idx.min(axis=0), idx.max(axis=0) + 1
        return cls(*(int(v) for v in lo), *(int(v) for v in hi))


class Action(enum.IntEnum):
    LX_POS = 0
    LX_NEG = 1
    LY_POS = 2
    LY_NEG = 3
    LZ_POS = 4
    LZ_NEG = 5
    S_POS = 6
    S_NEG = 7
    TRIGGER = 8


N_ACTIONS = len(Action)


# -- Dice ---------------------------------------------------------------------------


def _box_overlap(a: BoundingVolume, b: BoundingVolume) -> int:
    ext = [max(0, min(ah, bh) - max(al, bl)) for al, ah, bl, bh in zip(a.lo, a.hi, b.lo, b.hi)]
    return int(np.prod(ext))


def dice(a, b) -> float:
    """2|A∩B| / (|A| + |B|) for boxes or boolean masks on one lattice; 0 if both empty."""
    if isinstance(a, BoundingVolume) and isinstance(b, BoundingVolume):
        inter, sa, sb = _box_overlap(a, b), a.volume, b.volume
    elif isinstance(a, BoundingVolume) or isinstance(b, BoundingVolume):
        box, mask = (a, b) if isinstance(a, BoundingVolume) else (b, a)
        mask = np.asarray(mask, dtype=bool)
        inter, sa, sb = int(mask[box.slices].sum()), box.volume, int(mask.sum())
    else:
        a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
        if a.shape != b.shape:
            raise ValueError(f"regions on different lattices: {a.shape} vs {b.shape}")
        inter, sa, sb = int((a & b).sum()), int(a.sum()), int(b.sum())
    if sa + sb == 0:
        log.debug("dice of two empty regions; returning 0")
        return 0.0
    return 2.0 * inter / (sa + sb)


def best_dice(box: BoundingVolume, masks: Sequence[np.ndarray]) -> float:
    """Dice against the ground-truth lesion that overlaps ``box`` best (0 without lesions)."""
    return max((dice(box, m) for m in masks), default=0.0)


# -- actions ------------------------------------------------------------------------


def clamp(box: BoundingVolume, lattice, min_extent: int = MIN_EXTENT) -> BoundingVolume:
    """Shift a box back into the lattice (keeping its extent when it fits), then enforce ``min_extent``."""
    lo, hi = [], []
    for a, b, n in zip(box.lo, box.hi, lattice):
        m = min(min_extent, n)
        e = min(max(b - a, m), n)
        if b - a < m:
            centre = (a + b) / 2.0
            a = int(np.floor(centre - e / 2.0))
        a = min(max(a, 0), n - e)
        lo.append(a)
        hi.append(a + e)
    return BoundingVolume(*lo, *hi)


def apply_action(box: BoundingVolume, action: Action | int, lattice, min_extent: int = MIN_EXTENT) -> BoundingVolume:
    """Translate one axis by a third of its extent, or grow/shrink every axis by a sixth per side."""
    action = Action(action)
    if action == Action.TRIGGER:
        raise ValueError("the trigger action does not transform the box")
    lo, hi = list(box.lo), list(box.hi)
    if action <= Action.LZ_NEG:
        axis, sign = divmod(int(action), 2)
        step = (hi[axis] - lo[axis]) // 3 * (1 if sign == 0 else -1)
        lo[axis] += step
        hi[axis] += step
    else:
        for axis in range(3):
            d = (hi[axis] - lo[axis]) // 6
            if action == Action.S_POS:
                lo[axis] -= d
                hi[axis] += d
            else:
                if hi[axis] - lo[axis] - 2 * d < min_extent:
                    d = max(0, (hi[axis] - lo[axis] - min_extent) // 2)
                lo[axis] += d
                hi[axis] -= d
        for axis, n in enumerate(lattice):
            lo[axis], hi[axis] = max(lo[axis], 0), min(hi[axis], n)
    return clamp(BoundingVolume(*lo, *hi), lattice, min_extent)


def step_reward(d_before: float, action: Action | int, d_after: float, eta: float = ETA,
                trigger_dice: float = TRIGGER_DICE) -> float:
    """Sign of the Dice change for moves; +eta / -eta for the trigger depending on Dice >= threshold."""
    if Action(action) == Action.TRIGGER:
        return eta if d_after >= trigger_dice else -eta
    return float(np.sign(d_after - d_before))


def transition_reward(box: BoundingVolume, action: Action | int, masks: Sequence[np.ndarray], lattice,
                      eta: float = ETA, trigger_dice: float = TRIGGER_DICE) -> tuple[BoundingVolume, float]:
    """Next box and reward, with Dice measured against the best-matching lesion."""
    action = Action(action)
    nxt = box if action == Action.TRIGGER else apply_action(box, action, lattice)
    return nxt, step_reward(best_dice(box, masks), action, best_dice(nxt, masks), eta, trigger_dice)


# -- initial boxes --------------------------------------------------------------------


def centred_box(lattice, fraction: float = 0.75) -> BoundingVolume:
    ext = [max(MIN_EXTENT, int(round(n * fraction))) for n in lattice]
    lo = [(n - e) // 2 for n, e in zip(lattice, ext)]
    return BoundingVolume(*lo, *(a + e for a, e in zip(lo, ext)))


def inference_boxes(lattice) -> list[BoundingVolume]:
    """13 starts: the centred 75% box, 8 half-size corner boxes, 4 half-size boxes between them."""
    half = [max(MIN_EXTENT, n // 2) for n in lattice]
    boxes = [centred_box(lattice)]
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                lo = [c * (n - h) for c, n, h in zip((cx, cy, cz), lattice, half)]
                boxes.append(BoundingVolume(*lo, *(a + h for a, h in zip(lo, half))))
    # between the corner boxes: mid-depth, centred on each edge midpoint of the x-y plane
    mid = [(n - h) // 2 for n, h in zip(lattice, half)]
    for lo in (
        (mid[0], 0, mid[2]), (mid[0], lattice[1] - half[1], mid[2]),
        (0, mid[1], mid[2]), (lattice[0] - half[0], mid[1], mid[2]),
    ):
        boxes.append(BoundingVolume(*lo, *(a + h for a, h in zip(lo, half))))
    return boxes


# -- observation embedding --------------------------------------------------------------


def resample_box(volume: np.ndarray, box: BoundingVolume, extent) -> np.ndarray:
    """Trilinear resampling of the box content onto ``extent`` voxel centres."""
    axes = []
    for a, b, n in zip(box.lo, box.hi, extent):
        axes.append(a + (np.arange(n) + 0.5) * (b - a) / n - 0.5)
    grid = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(volume.astype(np.float64), grid, order=1, mode="nearest")
    return out.astype(np.float32)


@dataclass
class PatchEncoder:
    spec: NetworkSpec
    params: ParameterSet

    @property
    def input_extent(self) -> tuple[int, int, int]:
        return tuple(self.spec.input_shape[1:])

    @property
    def embedding_dim(self) -> int:
        return presets.embedding_dim(self.spec)

    def embed_patches(self, patches: np.ndarray) -> np.ndarray:
        """Embeddings for a batch of (N, X, Y, Z) patches already at the input extent."""
        idx = presets.embedding_layer_index(self.spec)
        with no_grad():
            _, feats = forward(self.spec, self.params, patches[:, None], training=False, features=True)
        return feats[idx].data.astype(np.float32)


@dataclass
class Observation:
    embedding: np.ndarray
    box: BoundingVolume


def embed(volume: np.ndarray, box: BoundingVolume, encoder: PatchEncoder) -> Observation:
    if min(box.extent) < MIN_EXTENT and min(box.extent) < min(volume.shape):
        raise ValueError(f"degenerate bounding volume {box} (minimum extent {MIN_EXTENT})")
    patch = resample_box(volume, box, encoder.input_extent)
    return Observation(encoder.embed_patches(patch[None])[0], box)


class EmbeddingCache:
    """Memoises embeddings per (volume key, box); boxes live on a discrete lattice."""

    def __init__(self, encoder: PatchEncoder, max_items: int = 200_000):
        self.encoder = encoder
        self.max_items = max_items
        self._store: dict = {}

    def get_many(self, key, volume: np.ndarray, boxes: Sequence[BoundingVolume]) -> np.ndarray:
        missing = [b for b in dict.fromkeys(boxes) if (key, b) not in self._store]
        if missing:
            patches = np.stack([resample_box(volume, b, self.encoder.input_extent) for b in missing])
            embs = self.encoder.embed_patches(patches)
            if len(self._store) + len(missing) > self.max_items:
                self._store.clear()
            for b, e in zip(missing, embs):
                self._store[(key, b)] = e
        return np.stack([self._store[(key, b)] for b in boxes])

    def get(self, key, volume, box) -> np.ndarray:
        return self.get_many(key, volume, [box])[0]


# -- patch encoder training -----------------------------------------------------------------


@dataclass
class EncoderConfig:
    input_extent: tuple[int, int, int] = (16, 16, 8)
    blocks: int = 3
    base_channels: int = 8
    head_channels: int = 4
    scale: float = 1.0
    positives: int = 800
    negatives: int = 800
    positive_dice: float = 0.6
    epochs: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    val_fraction: float = 0.15


def _random_box(rng: np.random.Generator, lattice) -> BoundingVolume:
    ext = [int(rng.integers(MIN_EXTENT, n + 1)) for n in lattice]
    lo = [int(rng.integers(0, n - e + 1)) for n, e in zip(lattice, ext)]
    return BoundingVolume(*lo, *(a + e for a, e in zip(lo, ext)))


def _jitter_box(rng: np.random.Generator, box: BoundingVolume, lattice, amount: float) -> BoundingVolume:
    lo, hi = [], []
    for a, b, n in zip(box.lo, box.hi, lattice):
        e = b - a
        na = a + int(round(rng.uniform(-amount, amount) * e))
        nb = b + int(round(rng.uniform(-amount, amount) * e))
        lo.append(na)
        hi.append(max(nb, na + 1))
    return clamp(BoundingVolume(*lo, *hi), lattice)


def label_patch(box: BoundingVolume, masks: Sequence[np.ndarray], positive_dice: float = 0.6) -> int:
    """1 when the box overlaps some lesion with Dice above ``positive_dice``."""
    return int(best_dice(box, masks) > positive_dice)


def sample_patches(samples, n_pos: int, n_neg: int, rng: np.random.Generator, positive_dice: float = 0.6):
    """Random boxes labelled by lesion overlap; positives come from jittered lesion boxes."""
    with_lesions = [s for s in samples if s.masks]
    if not with_lesions:
        raise ValueError("no training volume contains a lesion; cannot sample positive patches")
    pos, neg = [], []
    tries = 0
    while len(pos) < n_pos:
        tries += 1
        if tries > 200 * max(n_pos, 1):
            raise ValueError(f"only {len(pos)} positive patches found after {tries} draws (Dice > {positive_dice})")
        s = with_lesions[rng.integers(len(with_lesions))]
        m = s.masks[rng.integers(len(s.masks))]
        box = _jitter_box(rng, BoundingVolume.from_mask(m), s.volume.shape, 0.3)
        if label_patch(box, s.masks, positive_dice):
            pos.append((s, box))
    while len(neg) < n_neg:
        s = samples[rng.integers(len(samples))]
        if s.masks and rng.random() < 0.3:
            m = s.masks[rng.integers(len(s.masks))]
            box = _jitter_box(rng, BoundingVolume.from_mask(m), s.volume.shape, 1.0)
        else:
            box = _random_box(rng, s.volume.shape)
        if not label_patch(box, s.masks, positive_dice):
            neg.append((s, box))
    return pos, neg


def train_patch_encoder(trainset, config: EncoderConfig = EncoderConfig(), seed: int = 0):
    """Train the residual encoder as a lesion-patch classifier.

    Returns the encoder and the held-out patch accuracy.
    """
    rng = np.random.default_rng(seed)
    pos, neg = sample_patches(trainset, config.positives, config.negatives, rng, config.positive_dice)
    items = [(s, b, 1) for s, b in pos] + [(s, b, 0) for s, b in neg]
    x = np.stack([resample_box(s.volume, b, config.input_extent) for s, b, _ in items])[:, None]
    y = np.array([lab for _, _, lab in items])
    order = rng.permutation(len(y))
    n_val = int(round(len(y) * config.val_fraction))
    val_idx, tr_idx = order[:n_val], order[n_val:]

    spec = presets.residual_encoder(config.input_extent, config.blocks, config.base_channels,
                                    config.head_channels, config.scale)
    params = init_params(spec, rng)
    state = AdamState()
    for epoch in range(config.epochs):
        perm = rng.permutation(tr_idx)
        for k in range(0, len(perm), config.batch_size):
            b = perm[k: k + config.batch_size]
            loss = L.cross_entropy(forward(spec, params, x[b], training=True), y[b])
            adam_step(params, backward(loss, params), state, config.lr)
    params.training = False
    enc = PatchEncoder(spec, params)
    acc = patch_accuracy(enc, x[val_idx], y[val_idx]) if n_val else float("nan")
    log.info("patch encoder held-out accuracy %.3f", acc)
    return enc, acc


def patch_accuracy(encoder: PatchEncoder, x: np.ndarray, y: np.ndarray) -> float:
    with no_grad():
        logits = forward(encoder.spec, encoder.params, x, training=False).data
    return float((logits.argmax(axis=1) == y).mean())
