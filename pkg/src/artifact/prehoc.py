"""Pre-hoc stage two: classify detected regions and max-aggregate to a breast score."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detect.dqn import QNetwork, detect
from .detect.env import BoundingVolume, EmbeddingCache, resample_box
from .grad import NetworkSpec, ParameterSet, backward, forward, init_params, layers as L, no_grad, presets, sgd_step
from .metrics import DICE_MIN, roc_auc
from .phantom import MALIGNANT, BreastSample

log = logging.getLogger(__name__)

PATCH_EXTENT = (24, 24, 12)


def label_detections(boxes: Sequence[BoundingVolume], masks: Sequence[np.ndarray], classes: Sequence[int],
                     dice_min: float = DICE_MIN) -> list[int]:
    """1 when the best-matching lesion (Dice >= ``dice_min``) is malignant, else 0."""
    from .detect.env import dice

    out = []
    for b in boxes:
        ds = [dice(b, m) for m in masks]
        j = int(np.argmax(ds)) if ds else -1
        out.append(int(j >= 0 and ds[j] >= dice_min and classes[j] == MALIGNANT))
    return out


def extract_patches(volume: np.ndarray, boxes: Sequence[BoundingVolume], extent=PATCH_EXTENT) -> np.ndarray:
    if not boxes:
        return np.zeros((0, *extent), dtype=np.float32)
    return np.stack([resample_box(volume, b, extent) for b in boxes])


@dataclass
class Classifier:
    spec: NetworkSpec
    params: ParameterSet

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(self.spec.input_shape[1:])

    def probabilities(self, patches: np.ndarray, batch: int = 64) -> np.ndarray:
        """Malignancy probability per patch (eval mode)."""
        patches = np.asarray(patches, dtype=np.float32)
        if patches.ndim != 4 or patches.shape[1:] != self.extent:
            raise ValueError(f"patches must be (N, {self.extent}), got {patches.shape}")
        out = []
        with no_grad():
            for k in range(0, len(patches), batch):
                logits = forward(self.spec, self.params, patches[k: k + batch, None], training=False).data
                out.append(L.softmax_np(logits)[:, 1])
        return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def classify(patch: np.ndarray, clf: Classifier) -> float:
    return float(clf.probabilities(np.asarray(patch)[None])[0])


def breast_score(probabilities: Sequence[float]) -> float:
    """Max over detections; a breast without detections scores 0."""
    return float(max(probabilities, default=0.0))


@dataclass
class ClassifierConfig:
    patch_extent: tuple[int, int, int] = PATCH_EXTENT
    dense_blocks: int = 3
    layers_per_block: int = 2
    growth: int = 6
    compression: float = 0.5
    stem_channels: int = 8
    scale: float = 1.0
    lr: float = 0.01
    epochs: int = 20
    batch_size: int = 16
    include_lesion_boxes: bool = True
    dice_min: float = DICE_MIN

    def network(self) -> NetworkSpec:
        return presets.densenet(self.patch_extent, self.dense_blocks, self.layers_per_block, self.growth,
                                self.compression, self.stem_channels, scale=self.scale)


@dataclass
class ClassifierResult:
    classifier: Classifier
    best_epoch: int
    best_auc: float
    history: list[float] = field(default_factory=list)


def _training_boxes(s: BreastSample, dets: Sequence[BoundingVolume], include_lesions: bool):
    boxes = list(dets)
    if include_lesions:
        boxes += [BoundingVolume.from_mask(m) for m in s.masks]
    return boxes


def detections_for(samples: Sequence[BreastSample], q: QNetwork, cache: EmbeddingCache, merge: bool = True,
                   max_steps: int = 20, merge_dice: float = 0.5) -> dict[str, list]:
    return {s.breast_id: detect(s.volume, q, cache, s.breast_id, max_steps, merge_dice if merge else None)
            for s in samples}


def score_breasts(samples: Sequence[BreastSample], detections: dict[str, list], clf: Classifier) -> dict[str, float]:
    out = {}
    for s in samples:
        boxes = [d.box for d in detections.get(s.breast_id, [])]
        out[s.breast_id] = breast_score(clf.probabilities(extract_patches(s.volume, boxes, clf.extent)))
    return out


def train_classifier(trainset: Sequence[BreastSample], train_dets: dict[str, list],
                     valset: Sequence[BreastSample], val_dets: dict[str, list],
                     config: ClassifierConfig = ClassifierConfig(), seed: int = 0) -> ClassifierResult:
    """SGD on labelled detection patches; keeps the epoch with the best breast-wise validation AUC."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for s in trainset:
        boxes = _training_boxes(s, [d.box for d in train_dets.get(s.breast_id, [])], config.include_lesion_boxes)
        xs.append(extract_patches(s.volume, boxes, config.patch_extent))
        ys += label_detections(boxes, s.masks, s.labels, config.dice_min)
    x = np.concatenate(xs)[:, None]
    y = np.array(ys, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("training detections contain a single class; cannot train the classifier")
    log.info("classifier training patches: %d (%d malignant)", len(y), int(y.sum()))

    spec = config.network()
    params = init_params(spec, rng)
    clf = Classifier(spec, params)
    val_labels = [s.malignant for s in valset]
    can_select = len(set(val_labels)) == 2
    best = (-1.0, -1, params.copy())
    history = []
    for epoch in range(config.epochs):
        params.training = True
        perm = rng.permutation(len(y))
        for k in range(0, len(perm), config.batch_size):
            b = perm[k: k + config.batch_size]
            xb = x[b]
            # random flips along x and y; lesions have no preferred orientation
            if rng.random() < 0.5:
                xb = xb[:, :, ::-1]
            if rng.random() < 0.5:
                xb = xb[:, :, :, ::-1]
            loss = L.cross_entropy(forward(spec, params, np.ascontiguousarray(xb), training=True), y[b])
            sgd_step(params, backward(loss, params), config.lr)
        params.training = False
        if can_select:
            scores = score_breasts(valset, val_dets, clf)
            auc = roc_auc([scores[s.breast_id] for s in valset], val_labels)
        else:
            auc = 0.0
        history.append(auc)
        log.info("classifier epoch %d val breast AUC %.3f", epoch, auc)
        if auc >= best[0]:
            best = (auc, epoch, params.copy())
    clf = Classifier(spec, best[2])
    clf.params.training = False
    return ClassifierResult(clf, best[1], best[0], history)


def write_scores_csv(path, samples: Sequence[BreastSample], scores: dict[str, float]) -> None:
    """``breast_id, patient_id, score, label`` with label 1 for a breast holding a malignant lesion."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["breast_id", "patient_id", "score", "label"])
        for s in samples:
            w.writerow([s.breast_id, s.patient_id, repr(float(scores[s.breast_id])), s.malignant])


def read_scores_csv(path) -> list[tuple[str, str, float, int]]:
    with open(path, newline="") as fh:
        return [(r["breast_id"], r["patient_id"], float(r["score"]), int(r["label"])) for r in csv.DictReader(fh)]
