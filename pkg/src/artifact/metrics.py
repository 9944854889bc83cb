"""Evaluation: ROC/AUC, Dice-based detection matching, patient-wise FROC, curve output."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .detect.env import dice

DICE_MIN = 0.2


# -- ROC ------------------------------------------------------------------------------------


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite score")
    if y.all() or not y.any():
        raise ValueError("ROC needs both classes present")
    return s, y


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score of a random positive > score of a random negative), ties counting one half."""
    s, y = _check_binary(scores, labels)
    ranks = rankdata(s)
    n1 = int(y.sum())
    n0 = len(y) - n1
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> list[tuple[float, float, float]]:
    """(threshold, TPR, FPR) for every distinct score, plus the all-negative point."""
    s, y = _check_binary(scores, labels)
    pts = [(float("inf"), 0.0, 0.0)]
    for t in np.unique(s)[::-1]:
        pred = s >= t
        pts.append((float(t), float(pred[y].mean()), float(pred[~y].mean())))
    return pts


def patient_score(breast_scores: Sequence[float]) -> float:
    if not 1 <= len(breast_scores) <= 2:
        raise ValueError("a patient has one or two breast scores")
    return float(max(breast_scores))


def patient_scores(breast_scores: dict[str, float], breast_labels: dict[str, int],
                   patient_of: dict[str, str]) -> tuple[dict[str, float], dict[str, int]]:
    """Max-aggregate breast scores and labels per patient."""
    by_patient: dict[str, list[str]] = {}
    for b in breast_scores:
        by_patient.setdefault(patient_of[b], []).append(b)
    scores = {p: patient_score([breast_scores[b] for b in bs]) for p, bs in by_patient.items()}
    labels = {p: max(int(breast_labels[b]) for b in bs) for p, bs in by_patient.items()}
    return scores, labels


# -- detection matching --------------------------------------------------------------------


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (detection index, lesion index)
    false_positives: list[int]
    missed: list[int]

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.false_positives)


class Tagged(NamedTuple):
    """A box or mask labelled with the breast it lives in; regions from different breasts never overlap."""

    key: str
    region: object


def region_dice(a, b) -> float:
    if isinstance(a, Tagged) or isinstance(b, Tagged):
        if not (isinstance(a, Tagged) and isinstance(b, Tagged)):
            raise TypeError("cannot compare a tagged region with an untagged one")
        return dice(a.region, b.region) if a.key == b.key else 0.0
    return dice(a, b)


def dice_matrix(regions: Sequence, lesions: Sequence) -> np.ndarray:
    d = np.zeros((len(regions), len(lesions)))
    for i, r in enumerate(regions):
        for j, m in enumerate(lesions):
            d[i, j] = region_dice(r, m)
    return d


MATCHING = ("max", "greedy")


def match_detections(regions: Sequence, lesions: Sequence[np.ndarray], dice_min: float = DICE_MIN,
                     dmat: np.ndarray | None = None, method: str = "max") -> MatchResult:
    """One-to-one matching of regions to lesions; pairs below ``dice_min`` never match.

    ``"max"`` returns a matching with the largest possible number of pairs, and
    among those the largest total Dice. ``"greedy"`` takes pairs in descending
    Dice order, which can miss pairs when one region overlaps two lesions.
    """
    if method not in MATCHING:
        raise ValueError(f"unknown matching method {method!r}")
    d = dice_matrix(regions, lesions) if dmat is None else dmat
    ok = d >= dice_min
    if method == "greedy":
        cand = sorted((-d[i, j], i, j) for i, j in zip(*np.nonzero(ok)))
        used_d, used_l, pairs = set(), set(), []
        for _, i, j in cand:
            if i in used_d or j in used_l:
                continue
            used_d.add(i)
            used_l.add(j)
            pairs.append((int(i), int(j)))
    else:
        # every admissible pair outweighs any sum of Dice values, so cardinality comes first
        big = min(d.shape) + 1.0
        w = np.where(ok, big + d, 0.0)
        rows, cols = linear_sum_assignment(w, maximize=True) if w.size else ((), ())
        pairs = [(int(i), int(j)) for i, j in zip(rows, cols) if ok[i, j]]
    used_d = {i for i, _ in pairs}
    used_l = {j for _, j in pairs}
    fps = [i for i in range(d.shape[0]) if i not in used_d]
    missed = [j for j in range(d.shape[1]) if j not in used_l]
    return MatchResult(sorted(pairs), fps, missed)


# -- FROC ---------------------------------------------------------------------------------------


@dataclass
class FrocCase:
    """One patient: scored candidate regions and ground-truth lesion masks.

    ``target`` marks lesions that count toward TPR. A detection matched to a
    non-target lesion is neither a TP nor an FP. ``diagnosed`` marks patients
    with at least one breast called malignant (used by the "+" scenario).
    """

    regions: list
    scores: list[float]
    lesions: list[np.ndarray]
    target: list[bool] | None = None
    diagnosed: bool = True
    patient_id: str = ""
    _dmat: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.regions) != len(self.scores):
            raise ValueError("one score per region")
        if self.target is None:
            self.target = [True] * len(self.lesions)

    def dmat(self) -> np.ndarray:
        if self._dmat is None:
            self._dmat = dice_matrix(self.regions, self.lesions)
        return self._dmat


@dataclass(frozen=True)
class FrocPoint:
    threshold: float
    tpr: float
    fpp: float


def _case_counts(case: FrocCase, threshold: float, dice_min: float, matching: str) -> tuple[int, int]:
    keep = [i for i, s in enumerate(case.scores) if s >= threshold]
    d = case.dmat()[keep] if keep else np.zeros((0, len(case.lesions)))
    m = match_detections([case.regions[i] for i in keep], case.lesions, dice_min, dmat=d, method=matching)
    tp = sum(1 for _, j in m.pairs if case.target[j])
    return tp, m.fp


def froc(cases: Sequence[FrocCase], thresholds: Iterable[float] | None = None, scenario: str = "A",
         dice_min: float = DICE_MIN, matching: str = "max") -> list[FrocPoint]:
    """Patient-wise FROC, one point per threshold in descending order.

    ``scenario="A"`` counts every patient; ``"+"`` only patients with a
    positive diagnosis, for both the lesion and the patient denominators.
    """
    if scenario not in ("A", "+"):
        raise ValueError(f"unknown scenario {scenario!r}")
    pool = [c for c in cases if scenario == "A" or c.diagnosed]
    if thresholds is None:
        all_scores = {float(s) for c in pool for s in c.scores}
        thresholds = [float("inf"), *sorted(all_scores, reverse=True)]
    else:
        thresholds = sorted(thresholds, reverse=True)
    n_target = sum(sum(c.target) for c in pool)
    n_patients = len(pool)
    pts = []
    for t in thresholds:
        tp = fp = 0
        for c in pool:
            a, b = _case_counts(c, t, dice_min, matching)
            tp += a
            fp += b
        pts.append(FrocPoint(float(t), tp / n_target if n_target else 0.0, fp / n_patients if n_patients else 0.0))
    return pts


def sensitivity_at(points: Sequence[FrocPoint], max_fpp: float) -> float:
    """Best TPR among operating points with FPP <= ``max_fpp``."""
    ok = [p.tpr for p in points if p.fpp <= max_fpp]
    return max(ok) if ok else 0.0


# -- output ---------------------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_froc_csv(path, points: Sequence[FrocPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "tpr", "fpp"])
        for p in points:
            w.writerow([_fmt(p.threshold), _fmt(p.tpr), _fmt(p.fpp)])


def read_froc_csv(path) -> list[FrocPoint]:
    with open(path, newline="") as fh:
        return [FrocPoint(float(r["threshold"]), float(r["tpr"]), float(r["fpp"])) for r in csv.DictReader(fh)]


def write_roc_csv(path, points: Sequence[tuple[float, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "tpr", "fpr"])
        for t, tpr, fpr in points:
            w.writerow([_fmt(t), _fmt(tpr), _fmt(fpr)])


def write_svg(path, curves: dict[str, list[tuple[float, float]]], xlabel: str, ylabel: str,
              xmax: float | None = None, title: str = "") -> None:
    """Minimal line plot of (x, y) series; y is assumed to lie in [0, 1]."""
    w, h, m = 480, 360, 48
    xs = [x for pts in curves.values() for x, _ in pts if np.isfinite(x)]
    xmax = xmax or max(xs + [1.0])
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]

    def px(x, y):
        return m + (w - 2 * m) * min(x, xmax) / xmax, h - m - (h - 2 * m) * y

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">',
           f'<rect width="{w}" height="{h}" fill="white"/>',
           f'<line x1="{m}" y1="{h - m}" x2="{w - m}" y2="{h - m}" stroke="black"/>',
           f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h - m}" stroke="black"/>',
           f'<text x="{w / 2}" y="{h - 12}" text-anchor="middle">{xlabel}</text>',
           f'<text x="14" y="{h / 2}" transform="rotate(-90 14 {h / 2})" text-anchor="middle">{ylabel}</text>',
           f'<text x="{w / 2}" y="20" text-anchor="middle">{title}</text>']
    for k in range(5):
        x, y = xmax * k / 4, k / 4
        a, _ = px(x, 0)
        _, b = px(0, y)
        out.append(f'<text x="{a:.1f}" y="{h - m + 14}" text-anchor="middle">{x:.2g}</text>')
        out.append(f'<text x="{m - 6}" y="{b + 4:.1f}" text-anchor="end">{y:.2g}</text>')
    for n, (name, pts) in enumerate(curves.items()):
        c = colours[n % len(colours)]
        pts = sorted((x, y) for x, y in pts if np.isfinite(x))
        path_pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in (px(x, y) for x, y in pts))
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{path_pts}"/>')
        out.append(f'<text x="{w - m - 4}" y="{m + 14 * (n + 1)}" text-anchor="end" fill="{c}">{name}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
