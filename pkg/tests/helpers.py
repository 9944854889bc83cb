"""Shared oracles for the test suite."""

from __future__ import annotations

import itertools
import sys
from collections import deque
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from artifact.grad import ParameterSet

ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> None:
    """Record one acceptance line; the conftest hook prints them all at the end of the session."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, file=sys.__stdout__, flush=True)


@dataclass
class GradReport:
    max_rel_error: float
    checked: int
    kinks: int  # coordinates re-checked at a smaller step because the primary step crossed a non-smooth point


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(loss_fn, params: ParameterSet, analytic: dict, rng: np.random.Generator,
                    per_param: int = 3, h: float = 1e-4, small_h: float = 1e-6, tol: float = 1e-3) -> GradReport:
    """Central finite differences at step ``h`` on sampled coordinates of every float64 parameter.

    ReLU and absolute-value kinks make the primary step straddle a non-differentiable
    point for a few coordinates; those are recomputed at ``small_h`` and counted.
    """
    worst, checked, kinks = 0.0, 0, 0
    for name in params.names():
        flat = params[name].data.reshape(-1)
        assert params[name].data.dtype == np.float64
        g = np.asarray(analytic[name].data).reshape(-1)
        for k in rng.choice(flat.size, min(per_param, flat.size), replace=False):
            def fd(step):
                orig = flat[k]
                flat[k] = orig + step
                up = float(loss_fn(params))
                flat[k] = orig - step
                down = float(loss_fn(params))
                flat[k] = orig
                return (up - down) / (2 * step)

            err = rel_error(fd(h), g[k])
            if err >= tol:
                kinks += 1
                err = rel_error(fd(small_h), g[k])
            worst = max(worst, err)
            checked += 1
    return GradReport(worst, checked, kinks)


def brute_dice(a: np.ndarray, b: np.ndarray) -> float:
    inter = 0
    for v in zip(*np.nonzero(a)):
        inter += bool(b[v])
    tot = int(a.sum()) + int(b.sum())
    return 0.0 if tot == 0 else 2.0 * inter / tot


def pairwise_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def exhaustive_max_tp(dmat: np.ndarray, dice_min: float) -> int:
    """Largest one-to-one matching using only pairs with Dice >= ``dice_min``, by full search."""
    n_det, n_les = dmat.shape

    def best(j: int, used: frozenset) -> int:
        if j == n_les:
            return 0
        out = best(j + 1, used)
        for i in range(n_det):
            if i not in used and dmat[i, j] >= dice_min:
                out = max(out, 1 + best(j + 1, used | {i}))
        return out

    return best(0, frozenset())


def flood_fill_components(binary: np.ndarray) -> list[frozenset]:
    """6-connected components by breadth-first search; each component is a set of voxel triples."""
    seen = np.zeros(binary.shape, bool)
    comps = []
    for start in zip(*np.nonzero(binary)):
        if seen[start]:
            continue
        comp, q = set(), deque([start])
        seen[start] = True
        while q:
            v = q.popleft()
            comp.add(tuple(int(c) for c in v))
            for ax in range(3):
                for d in (-1, 1):
                    w = list(v)
                    w[ax] += d
                    w = tuple(w)
                    if all(0 <= w[i] < binary.shape[i] for i in range(3)) and binary[w] and not seen[w]:
                        seen[w] = True
                        q.append(w)
        comps.append(frozenset(comp))
    return comps


def rate_gap(scores, labels, t) -> Fraction:
    """|FPR - FNR| at threshold ``t`` as an exact fraction (positive when score > t)."""
    s = np.asarray(scores, float)
    y = np.asarray(labels).astype(bool)
    pred = s > t
    fpr = Fraction(int(pred[~y].sum()), int((~y).sum()))
    fnr = Fraction(int((~pred[y]).sum()), int(y.sum()))
    return abs(fpr - fnr)


def sweep_eer(scores, labels) -> Fraction:
    """min over all midpoint thresholds of |FPR - FNR|, exactly."""
    u = np.unique(np.asarray(scores, float))
    return min(rate_gap(scores, labels, t) for t in (u[:-1] + u[1:]) / 2)


def ce_grad_logistic(w, x, y):
    """Hand-derived gradient of mean softmax cross-entropy for logits = W x, W of shape (2, 1)."""
    logits = x @ w.T
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(len(y)), y] -= 1.0
    return p.T @ x / len(y)


def enumerated_probs(buffers: dict[str, list[float]], cold: float = 1.0) -> dict[str, float]:
    """Exact slot-win probabilities: all joint draws (uniform per buffer), ties split evenly."""
    ids = list(buffers)
    out = dict.fromkeys(ids, 0.0)
    pools = [buffers[t] if buffers[t] else [cold] for t in ids]
    combos = list(itertools.product(*pools))
    for draw in combos:
        a = np.abs(draw)
        win = [i for i in range(len(ids)) if a[i] == a.max()]
        for i in win:
            out[ids[i]] += 1.0 / (len(win) * len(combos))
    return out
