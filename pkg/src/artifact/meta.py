"""Post-hoc stage one: curriculum meta-training over five related tasks, fine-tuning, diagnosis."""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grad import Array, NetworkSpec, NonFiniteGradient, ParameterSet, backward, forward, grad, init_params
from .grad import layers as L, no_grad, presets, sgd_step
from .metrics import roc_auc
from .phantom import BreastSample

log = logging.getLogger(__name__)

TASK_IDS = ("K1", "K2", "K3", "K4", "K5")

# (positive labels, negative labels) over the breast label y in {0, 1, 2}
TASK_CLASSES: dict[str, tuple[frozenset, frozenset]] = {
    "K1": (frozenset({1, 2}), frozenset({0})),  # findings vs none
    "K2": (frozenset({2}), frozenset({0})),  # malignant vs none
    "K3": (frozenset({1}), frozenset({0})),  # benign vs none
    "K4": (frozenset({2}), frozenset({1})),  # malignant vs benign
    "K5": (frozenset({2}), frozenset({0, 1})),  # screening
}


@dataclass(frozen=True)
class TaskDef:
    task_id: str
    pos: tuple[int, ...]  # indices into the training list
    neg: tuple[int, ...]


def build_tasks(labels: Sequence[int], n_tr: int = 4, n_val: int = 4) -> list[TaskDef]:
    """Task pools from breast labels; every class pool needs at least ``n_tr + n_val`` members."""
    tasks, short = [], []
    for tid in TASK_IDS:
        pos_set, neg_set = TASK_CLASSES[tid]
        pos = tuple(i for i, y in enumerate(labels) if y in pos_set)
        neg = tuple(i for i, y in enumerate(labels) if y in neg_set)
        if min(len(pos), len(neg)) < n_tr + n_val:
            short.append(f"{tid}: {len(pos)} positive / {len(neg)} negative")
        tasks.append(TaskDef(tid, pos, neg))
    if short:
        raise ValueError(f"task pools need >= {n_tr + n_val} samples per class; " + "; ".join(short))
    return tasks


@dataclass
class Episode:
    task_id: str
    tr: np.ndarray  # indices
    y_tr: np.ndarray
    val: np.ndarray
    y_val: np.ndarray


def sample_episode(task: TaskDef, rng: np.random.Generator, n_tr: int = 4, n_val: int = 4) -> Episode:
    """Class-balanced, disjoint training and validation draws from the task pools."""
    htr, hval = n_tr // 2, n_val // 2
    p = rng.choice(task.pos, htr + hval, replace=False)
    n = rng.choice(task.neg, (n_tr - htr) + (n_val - hval), replace=False)
    tr = np.concatenate([p[:htr], n[: n_tr - htr]])
    val = np.concatenate([p[htr:], n[n_tr - htr:]])
    y_tr = np.r_[np.ones(htr, int), np.zeros(n_tr - htr, int)]
    y_val = np.r_[np.ones(hval, int), np.zeros(n_val - hval, int)]
    return Episode(task.task_id, tr, y_tr, val, y_val)


# -- inner and outer updates -----------------------------------------------------------------


def _loss(spec: NetworkSpec, params: ParameterSet, x, y, update_stats: bool = False) -> Array:
    return L.cross_entropy(forward(spec, params, x, training=True, update_stats=update_stats), y)


def adapt(spec: NetworkSpec, params: ParameterSet, x: np.ndarray, y: np.ndarray, alpha: float = 0.01,
          steps: int = 5, create_graph: bool = False) -> ParameterSet:
    """``steps`` gradient-descent updates on the cross-entropy of (x, y); ``params`` is not modified.

    With ``create_graph`` the returned arrays stay connected to ``params`` so a
    later loss can be differentiated through the adaptation.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    names = params.names()
    cur = {k: params[k] for k in names}
    if not create_graph:
        cur = {k: Array(v.data.copy(), requires_grad=True, name=k) for k, v in cur.items()}
    for _ in range(steps):
        loss = _loss(spec, params.with_params(cur), x, y)
        if not np.isfinite(loss.data):
            raise NonFiniteGradient(["adaptation loss"])
        gs = grad(loss, [cur[k] for k in names], create_graph=create_graph)
        if create_graph:
            cur = {k: cur[k] - g * alpha for k, g in zip(names, gs)}
        else:
            cur = {k: Array(cur[k].data - alpha * g.data, requires_grad=True, name=k) for k, g in zip(names, gs)}
    return params.with_params(cur)


def meta_gradient(spec: NetworkSpec, params: ParameterSet, adapted: Sequence[tuple[ParameterSet, np.ndarray, np.ndarray]],
                  first_order: bool = False, average: bool = True) -> dict[str, np.ndarray]:
    """Gradient of the (mean or summed) post-adaptation validation loss with respect to ``params``.

    Second order differentiates through the adaptation graph; first order uses
    the gradient at each adapted point as is.
    """
    names = params.names()
    total = {k: np.zeros_like(params[k].data) for k in names}
    for p_adapted, x, y in adapted:
        loss = _loss(spec, p_adapted, x, y)
        wrt = [p_adapted[k] for k in names] if first_order else [params[k] for k in names]
        for k, g in zip(names, grad(loss, wrt)):
            total[k] += g.data
    if average and adapted:
        for k in names:
            total[k] /= len(adapted)
    return total


def meta_update(spec: NetworkSpec, params: ParameterSet, adapted, beta: float = 0.001, first_order: bool = False,
                average: bool = True) -> tuple[ParameterSet, bool]:
    """One outer step; returns (new parameters, applied). Non-finite meta-gradients skip the step."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    g = meta_gradient(spec, params, adapted, first_order, average)
    new = params.copy()
    try:
        sgd_step(new, {k: Array(v) for k, v in g.items()}, beta)
    except NonFiniteGradient:
        log.warning("non-finite meta-gradient; iteration skipped")
        return params.copy(), False
    return new, True


# -- curriculum -----------------------------------------------------------------------------------


@dataclass
class RewardBuffer:
    capacity: int = 40
    rewards: deque = field(default_factory=deque)
    last_observation: float | None = None

    def push(self, r: float) -> None:
        if not np.isfinite(r):
            raise ValueError("reward must be finite")
        self.rewards.append(float(r))
        while len(self.rewards) > self.capacity:
            self.rewards.popleft()


COLD_START_REWARD = 1.0


@dataclass
class CurriculumState:
    buffers: dict[str, RewardBuffer]
    budget: int = 300
    t: int = 0

    @classmethod
    def create(cls, task_ids: Sequence[str] = TASK_IDS, capacity: int = 40, budget: int = 300) -> CurriculumState:
        return cls({tid: RewardBuffer(capacity) for tid in task_ids}, budget)


def curriculum_sample(state: CurriculumState, rng: np.random.Generator, k: int = 5) -> list[str]:
    """Thompson-style draw: per slot, one reward per buffer, the largest |reward| wins."""
    ids = list(state.buffers)
    out = []
    for _ in range(k):
        draws = []
        for tid in ids:
            buf = state.buffers[tid].rewards
            draws.append(abs(buf[rng.integers(len(buf))]) if buf else COLD_START_REWARD)
        draws = np.asarray(draws)
        best = np.flatnonzero(draws == draws.max())
        out.append(ids[int(best[rng.integers(len(best))])])
    return out


def observe_and_reward(state: CurriculumState, task_id: str, auc_before: float, auc_after: float) -> float:
    """Observation is the AUC change; the reward is its change since the task's previous observation."""
    buf = state.buffers[task_id]
    obs = auc_after - auc_before
    r = obs if buf.last_observation is None else obs - buf.last_observation
    buf.push(r)
    buf.last_observation = obs
    return r


# -- volume classifier -----------------------------------------------------------------------------------


@dataclass
class VolumeNetConfig:
    extent: tuple[int, int, int] = (32, 32, 16)
    dense_blocks: int = 3
    layers_per_block: int = 2
    growth: int = 6
    compression: float = 0.5
    stem_channels: int = 8
    stem_stride: int = 2
    scale: float = 1.0

    def network(self) -> NetworkSpec:
        return presets.densenet(self.extent, self.dense_blocks, self.layers_per_block, self.growth, self.compression,
                                self.stem_channels, self.stem_stride, self.scale)


def probabilities(spec: NetworkSpec, params: ParameterSet, x: np.ndarray, training: bool = False,
                  batch: int = 32) -> np.ndarray:
    """Malignancy probabilities for (N, X, Y, Z) volumes; eval mode unless ``training``."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4 or x.shape[1:] != tuple(spec.input_shape[1:]):
        raise ValueError(f"volumes must be (N, {tuple(spec.input_shape[1:])}), got {x.shape}")
    out = []
    with no_grad():
        for k in range(0, len(x), batch):
            logits = forward(spec, params, x[k: k + batch, None], training=training, update_stats=False).data
            out.append(L.softmax_np(logits)[:, 1])
    return np.concatenate(out)


def diagnose(volume: np.ndarray, spec: NetworkSpec, params: ParameterSet) -> float:
    return float(probabilities(spec, params, np.asarray(volume)[None])[0])


def _episode_auc(spec, params, x, y, update_stats=False) -> float:
    """AUC on an episode's validation draw, using batch statistics like the adaptation losses."""
    with no_grad():
        logits = forward(spec, params, x, training=True, update_stats=update_stats).data
    return roc_auc(L.softmax_np(logits)[:, 1], y)


# -- meta-training -------------------------------------------------------------------------------------


@dataclass
class MetaConfig:
    alpha: float = 0.01
    beta: float = 0.001
    inner_steps: int = 5
    iterations: int = 300
    tasks_per_batch: int = 5
    n_tr: int = 4
    n_val: int = 4
    buffer_size: int = 40
    first_order: bool = False
    average: bool = True
    net: VolumeNetConfig = field(default_factory=VolumeNetConfig)


@dataclass
class MetaResult:
    spec: NetworkSpec
    params: ParameterSet
    log: list[dict]
    state: CurriculumState


def meta_train(trainset: Sequence[BreastSample], config: MetaConfig = MetaConfig(), seed: int = 0,
               init: ParameterSet | None = None, log_path=None) -> MetaResult:
    """Curriculum meta-training; every task-episode is one row of the returned log."""
    rng = np.random.default_rng(seed)
    spec = config.net.network()
    params = init.copy() if init is not None else init_params(spec, rng)
    x_all = np.stack([s.volume for s in trainset])[:, None].astype(np.float32)
    tasks = {t.task_id: t for t in build_tasks([s.y for s in trainset], config.n_tr, config.n_val)}
    state = CurriculumState.create(list(tasks), config.buffer_size, config.iterations)
    rows: list[dict] = []
    for it in range(config.iterations):
        chosen = curriculum_sample(state, rng, config.tasks_per_batch)
        adapted = []
        for tid in chosen:
            ep = sample_episode(tasks[tid], rng, config.n_tr, config.n_val)
            xv, xt = x_all[ep.val], x_all[ep.tr]
            # forward at theta on the validation draw also refreshes the running statistics
            before = _episode_auc(spec, params, xv, ep.y_val, update_stats=True)
            try:
                p_adapted = adapt(spec, params, xt, ep.y_tr, config.alpha, config.inner_steps,
                                  create_graph=not config.first_order)
                after = _episode_auc(spec, p_adapted, xv, ep.y_val)
                adapted.append((p_adapted, xv, ep.y_val))
            except NonFiniteGradient:
                log.warning("iteration %d task %s: non-finite adaptation loss", it, tid)
                after = before
            r = observe_and_reward(state, tid, before, after)
            rows.append({"iteration": it, "task": tid, "auc_before": before, "auc_after": after, "reward": r})
        if adapted:
            params, _ = meta_update(spec, params, adapted, config.beta, config.first_order, config.average)
        state.t = it + 1
    params.training = False
    if log_path is not None:
        write_meta_log(log_path, rows)
    return MetaResult(spec, params, rows, state)


def write_meta_log(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["iteration", "task", "auc_before", "auc_after", "reward"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


# -- fine-tuning ---------------------------------------------------------------------------------------


@dataclass
class FineTuneConfig:
    lr: float = 0.01
    epochs: int = 20
    batch_size: int = 8
    flips: bool = False


@dataclass
class FineTuneResult:
    params: ParameterSet
    best_epoch: int  # 0 is the initialisation itself
    best_val_auc: float
    history: list[float]


def fine_tune(spec: NetworkSpec, init: ParameterSet, trainset: Sequence[BreastSample], valset: Sequence[BreastSample],
              config: FineTuneConfig = FineTuneConfig(), seed: int = 0) -> FineTuneResult:
    """SGD on the screening task over all training breasts; best validation AUC wins (init included)."""
    rng = np.random.default_rng(seed)
    params = init.copy()
    x = np.stack([s.volume for s in trainset])[:, None].astype(np.float32)
    y = np.array([s.malignant for s in trainset])
    xv = np.stack([s.volume for s in valset]).astype(np.float32)
    yv = [s.malignant for s in valset]

    def val_auc():
        return roc_auc(probabilities(spec, params, xv), yv)

    best = (val_auc(), 0, params.copy())
    history = [best[0]]
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(y))
        for k in range(0, len(perm), config.batch_size):
            b = perm[k: k + config.batch_size]
            if len(b) < 2:
                continue  # batch statistics need at least two samples
            xb = x[b]
            if config.flips and rng.random() < 0.5:
                xb = xb[:, :, ::-1]
            if config.flips and rng.random() < 0.5:
                xb = xb[:, :, :, ::-1]
            loss = _loss(spec, params, np.ascontiguousarray(xb), y[b], update_stats=True)
            sgd_step(params, backward(loss, params), config.lr)
        auc = val_auc()
        history.append(auc)
        if auc > best[0]:
            best = (auc, epoch, params.copy())
    out = best[2]
    out.training = False
    return FineTuneResult(out, best[1], best[0], history)
