"""Synthetic breast-like volumes with benign and malignant blob lesions.

Each sample is one breast already cropped and resized to the working lattice.
Malignant lesions enhance more strongly and have rougher boundaries than
benign ones; the background is smoothed noise over a low-frequency gradient.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

BENIGN, MALIGNANT = 0, 1
SIDES = ("left", "right")


@dataclass(frozen=True)
class PhantomConfig:
    extent: tuple[int, int, int] = (32, 32, 16)
    # probabilities of 0, 1, 2 lesions per breast
    lesion_count_probs: tuple[float, ...] = (0.45, 0.4, 0.15)
    malignant_prob: float = 0.55
    lesion_count: int | None = None  # forces the count when set
    force_classes: tuple[int, ...] | None = None  # forces lesion classes when set
    radius_range: tuple[float, float] = (3.0, 5.0)
    z_radius_factor: float = 0.6
    benign_contrast: tuple[float, float] = (0.22, 0.42)
    malignant_contrast: tuple[float, float] = (0.32, 0.55)
    benign_roughness: tuple[float, float] = (0.0, 0.15)
    malignant_roughness: tuple[float, float] = (0.2, 0.45)
    noise: float = 0.04
    background_level: float = 0.25
    background_texture: float = 0.12
    background_gradient: float = 0.12
    center_lesion: bool = False
    min_radius: float = 1.5

    @classmethod
    def tier(cls, name: str, **overrides) -> PhantomConfig:
        """Named difficulty tiers; ``easy`` has one large, high-contrast lesion per breast."""
        presets = {
            "default": {},
            "easy": dict(
                lesion_count_probs=(0.0, 1.0, 0.0), radius_range=(4.0, 5.5),
                benign_contrast=(0.4, 0.5), malignant_contrast=(0.5, 0.6), noise=0.03,
                background_texture=0.08,
            ),
            "hard": dict(
                radius_range=(2.0, 4.0), benign_contrast=(0.18, 0.38), malignant_contrast=(0.24, 0.44),
                malignant_roughness=(0.12, 0.35), noise=0.06,
            ),
        }
        if name not in presets:
            raise ValueError(f"unknown phantom tier {name!r}")
        return replace(cls(), **{**presets[name], **overrides})

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> PhantomConfig:
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass
class LesionSpec:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    cls: int  # BENIGN or MALIGNANT
    contrast: float
    roughness: float


@dataclass
class BreastSample:
    patient_id: str
    side: str
    volume: np.ndarray  # float32 (X, Y, Z) in [0, 1]
    masks: list[np.ndarray] = field(default_factory=list)  # bool (X, Y, Z), one per lesion
    labels: list[int] = field(default_factory=list)
    y: int = 0
    lesions: list[LesionSpec] = field(default_factory=list)
    overlapping: bool = False

    @property
    def breast_id(self) -> str:
        return f"{self.patient_id}-{self.side[0].upper()}"

    @property
    def malignant(self) -> int:
        """Screening label: 1 for y == 2, else 0."""
        return int(self.y == 2)


def label_breast(labels: Sequence[int]) -> int:
    """0 for no lesion, 1 if every lesion is benign, 2 if any lesion is malignant."""
    labels = list(labels)
    if not labels:
        return 0
    for lab in labels:
        if lab not in (BENIGN, MALIGNANT):
            raise ValueError(f"lesion label must be benign(0) or malignant(1), got {lab!r}")
    return 2 if MALIGNANT in labels else 1


def _background(rng: np.random.Generator, cfg: PhantomConfig) -> np.ndarray:
    ext = cfg.extent
    tex = ndimage.gaussian_filter(rng.standard_normal(ext), sigma=2.0, mode="wrap")
    tex /= tex.std() + 1e-12
    grids = np.meshgrid(*[np.linspace(-1, 1, n) for n in ext], indexing="ij")
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    grad = sum(d * g for d, g in zip(direction, grids))
    return cfg.background_level + cfg.background_texture * tex + cfg.background_gradient * grad


def _boundary_field(rng: np.random.Generator):
    """Smooth random function on the unit sphere with values in [-1, 1]."""
    freqs = rng.normal(scale=2.5, size=(6, 3))
    phases = rng.uniform(0, 2 * np.pi, size=6)
    amps = rng.uniform(0.5, 1.0, size=6)

    def f(u: np.ndarray) -> np.ndarray:
        val = sum(a * np.sin(u @ w + p) for a, w, p in zip(amps, freqs, phases))
        return val / amps.sum()

    return f


def _rasterize(lesion: LesionSpec, extent, rng: np.random.Generator) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in extent], indexing="ij")
    rel = np.stack([(g - c) / r for g, c, r in zip(grids, lesion.center, lesion.radii)], axis=-1)
    dist = np.linalg.norm(rel, axis=-1)
    u = rel / np.maximum(dist[..., None], 1e-9)
    boundary = 1.0 + lesion.roughness * _boundary_field(rng)(u)
    return dist <= boundary


def _fits(center, radii, roughness, extent) -> bool:
    reach = [r * (1 + roughness) for r in radii]
    return all(c - q >= 0 and c + q <= n - 1 for c, q, n in zip(center, reach, extent))


def _sample_lesion(rng: np.random.Generator, cfg: PhantomConfig, cls: int, taken: list[LesionSpec]) -> LesionSpec:
    if cls == MALIGNANT:
        contrast = rng.uniform(*cfg.malignant_contrast)
        rough = rng.uniform(*cfg.malignant_roughness)
    else:
        contrast = rng.uniform(*cfg.benign_contrast)
        rough = rng.uniform(*cfg.benign_roughness)
    r = rng.uniform(*cfg.radius_range, size=2)
    radii = (float(r[0]), float(r[1]), float(max(cfg.min_radius, r.mean() * cfg.z_radius_factor)))
    extent = cfg.extent
    for shrink in range(20):
        reach = [q * (1 + rough) for q in radii]
        if all(2 * q <= n - 1 for q, n in zip(reach, extent)):
            for _ in range(50):
                if cfg.center_lesion:
                    center = tuple((n - 1) / 2.0 for n in extent)
                else:
                    center = tuple(float(rng.uniform(q, n - 1 - q)) for q, n in zip(reach, extent))
                clear = all(
                    np.linalg.norm((np.subtract(center, o.center)) / (np.add(radii, o.radii) * 1.1)) > 1.0
                    for o in taken
                )
                if clear or cfg.center_lesion:
                    return LesionSpec(center, radii, cls, float(contrast), float(rough))
        new = tuple(max(cfg.min_radius * 0.5, q * 0.8) for q in radii)
        log.info("lesion with radii %s does not fit lattice %s; shrinking to %s", radii, extent, new)
        radii = new
    # crowded lattice: accept an overlapping placement
    reach = [q * (1 + rough) for q in radii]
    center = tuple(float(rng.uniform(min(q, (n - 1) / 2), max(n - 1 - q, (n - 1) / 2))) for q, n in zip(reach, extent))
    return LesionSpec(center, radii, cls, float(contrast), float(rough))


def generate_phantom(
    seed: int | Sequence[int] | np.random.SeedSequence,
    config: PhantomConfig = PhantomConfig(),
    patient_id: str = "P000",
    side: str = "left",
) -> BreastSample:
    """One synthetic breast, fully determined by ``seed`` and ``config``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    cfg = config
    if cfg.lesion_count is not None:
        n = cfg.lesion_count
    elif cfg.force_classes is not None:
        n = len(cfg.force_classes)
    else:
        probs = np.asarray(cfg.lesion_count_probs, dtype=float)
        n = int(rng.choice(len(probs), p=probs / probs.sum()))
    if cfg.force_classes is not None:
        classes = [int(c) for c in cfg.force_classes][:n]
        classes += [MALIGNANT if rng.random() < cfg.malignant_prob else BENIGN for _ in range(n - len(classes))]
    else:
        classes = [MALIGNANT if rng.random() < cfg.malignant_prob else BENIGN for _ in range(n)]

    vol = _background(rng, cfg)
    lesions: list[LesionSpec] = []
    masks: list[np.ndarray] = []
    for cls in classes:
        les = _sample_lesion(rng, cfg, cls, lesions)
        mask = _rasterize(les, cfg.extent, rng)
        if not mask.any():
            # tiny blobs can fall between lattice points; keep the centre voxel
            mask[tuple(int(round(c)) for c in les.center)] = True
        lesions.append(les)
        masks.append(mask)
        inner = ndimage.gaussian_filter(rng.standard_normal(cfg.extent), sigma=1.0)
        inner /= inner.std() + 1e-12
        spread = 0.25 if cls == MALIGNANT else 0.08
        vol = vol + mask * les.contrast * (1.0 + spread * inner)
    vol = vol + cfg.noise * rng.standard_normal(cfg.extent)
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    overlapping = any((masks[i] & masks[j]).any() for i in range(len(masks)) for j in range(i + 1, len(masks)))
    return BreastSample(
        patient_id=patient_id, side=side, volume=vol, masks=masks, labels=list(classes),
        y=label_breast(classes), lesions=lesions, overlapping=overlapping,
    )


def patient_ids(n: int) -> list[str]:
    return [f"P{i:03d}" for i in range(n)]


def generate_dataset(n_patients: int, config: PhantomConfig = PhantomConfig(), seed: int = 0) -> list[BreastSample]:
    """Two breasts per patient; breast seeds are spawned from ``seed`` by index."""
    out = []
    for i, pid in enumerate(patient_ids(n_patients)):
        for s, side in enumerate(SIDES):
            out.append(generate_phantom(np.random.SeedSequence(seed, spawn_key=(i, s)), config, pid, side))
    return out


# -- splits -----------------------------------------------------------------------

PAPER_SPLIT = (45 / 117, 13 / 117, 59 / 117)


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]

    def of(self, patient_id: str) -> str:
        for name in ("train", "val", "test"):
            if patient_id in getattr(self, name):
                return name
        raise KeyError(patient_id)


def make_split(patients: Sequence[str], ratios: Sequence[float] = PAPER_SPLIT, seed: int = 0) -> DatasetSplit:
    """Patient-wise train/val/test split with largest-remainder rounding."""
    ratios = np.asarray(ratios, dtype=float)
    if len(ratios) != 3:
        raise ValueError("need three ratios (train, val, test)")
    if abs(ratios.sum() - 1.0) > 1e-6 or (ratios < 0).any():
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios.tolist()}")
    patients = list(dict.fromkeys(patients))
    n = len(patients)
    active = int((ratios > 0).sum())
    if n < active:
        raise ValueError(f"{n} patients cannot fill {active} splits")
    raw = ratios * n
    sizes = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    # every split with positive ratio gets at least one patient
    for i in range(3):
        while ratios[i] > 0 and sizes[i] == 0:
            j = int(np.argmax(sizes))
            sizes[j] -= 1
            sizes[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [patients[k] for k in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return DatasetSplit(sorted(shuffled[:a]), sorted(shuffled[a:b]), sorted(shuffled[b:]))


def select(samples: Sequence[BreastSample], patients: Sequence[str]) -> list[BreastSample]:
    keep = set(patients)
    return [s for s in samples if s.patient_id in keep]


# -- persistence -------------------------------------------------------------------


def encode_rle(mask: np.ndarray) -> np.ndarray:
    """Run lengths of a flattened boolean mask, starting with a (possibly empty) run of zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat.size and flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.uint32)


def decode_rle(runs: np.ndarray, extent) -> np.ndarray:
    vals = np.arange(len(runs)) % 2 == 1
    return np.repeat(vals, runs.astype(np.int64)).reshape(extent)


def _volume_record(vol: np.ndarray) -> bytes:
    return struct.pack("<3I", *vol.shape) + np.ascontiguousarray(vol, dtype="<f4").tobytes()


def read_volume_record(buf: bytes, offset: int) -> np.ndarray:
    ext = struct.unpack_from("<3I", buf, offset)
    n = int(np.prod(ext))
    return np.frombuffer(buf, dtype="<f4", count=n, offset=offset + 12).astype(np.float32).reshape(ext)


def write_dataset(samples: Sequence[BreastSample], directory, split: DatasetSplit | None = None,
                  config: PhantomConfig | None = None) -> Path:
    """Write ``volumes.bin``, ``masks.bin`` and ``manifest.jsonl`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    vol_buf, mask_buf, records = bytearray(), bytearray(), []
    for s in samples:
        voff = len(vol_buf)
        vol_buf += _volume_record(s.volume)
        lesion_recs = []
        for m, lab, les in zip(s.masks, s.labels, s.lesions):
            runs = encode_rle(m)
            moff = len(mask_buf)
            mask_buf += struct.pack("<3II", *m.shape, len(runs)) + runs.astype("<u4").tobytes()
            lesion_recs.append({
                "label": int(lab), "mask_offset": moff,
                "center": [round(c, 6) for c in les.center], "radii": [round(r, 6) for r in les.radii],
                "contrast": round(les.contrast, 6), "roughness": round(les.roughness, 6),
            })
        records.append({
            "breast_id": s.breast_id, "patient_id": s.patient_id, "side": s.side, "y": s.y,
            "split": split.of(s.patient_id) if split else None,
            "volume_offset": voff, "lesions": lesion_recs, "overlapping": s.overlapping,
        })
    (d / "volumes.bin").write_bytes(bytes(vol_buf))
    (d / "masks.bin").write_bytes(bytes(mask_buf))
    with open(d / "manifest.jsonl", "w") as fh:
        if config is not None:
            fh.write(json.dumps({"phantom_config": config.to_dict()}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return d


def read_dataset(directory) -> tuple[list[BreastSample], DatasetSplit | None]:
    d = Path(directory)
    vols = (d / "volumes.bin").read_bytes()
    masks = (d / "masks.bin").read_bytes()
    samples, splits = [], {"train": [], "val": [], "test": []}
    has_split = False
    for line in (d / "manifest.jsonl").read_text().splitlines():
        r = json.loads(line)
        if "phantom_config" in r:
            continue
        vol = read_volume_record(vols, r["volume_offset"])
        ms, labels, lesions = [], [], []
        for lr in r["lesions"]:
            off = lr["mask_offset"]
            *ext, n = struct.unpack_from("<3II", masks, off)
            runs = np.frombuffer(masks, dtype="<u4", count=n, offset=off + 16)
            ms.append(decode_rle(runs, ext))
            labels.append(lr["label"])
            lesions.append(LesionSpec(tuple(lr["center"]), tuple(lr["radii"]), lr["label"], lr["contrast"],
                                      lr["roughness"]))
        samples.append(BreastSample(r["patient_id"], r["side"], vol, ms, labels, r["y"], lesions, r["overlapping"]))
        if r.get("split"):
            has_split = True
            if r["patient_id"] not in splits[r["split"]]:
                splits[r["split"]].append(r["patient_id"])
    split = DatasetSplit(sorted(splits["train"]), sorted(splits["val"]), sorted(splits["test"])) if has_split else None
    return samples, split
