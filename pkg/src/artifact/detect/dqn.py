"""Deep Q-learning for bounding-volume lesion search.

The training loop is written against a small environment protocol so the
same replay / target-network / exploration code drives both the breast
environment and the tabular toy used as a plumbing check.
"""

from __future__ import annotations

import csv
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from ..grad import AdamState, Array, NetworkSpec, NonFiniteGradient, ParameterSet, adam_step, backward, forward
from ..grad import init_params, no_grad, presets, save_checkpoint
from .env import (
    ETA, N_ACTIONS, TRIGGER_DICE, Action, BoundingVolume, EmbeddingCache, PatchEncoder, apply_action, best_dice,
    centred_box, dice, inference_boxes, step_reward,
)

log = logging.getLogger(__name__)


# -- replay memory and exploration ------------------------------------------------------


@dataclass
class Experience:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling over its contents."""

    def __init__(self, capacity: int = 10_000, dim: int | None = None):
        self.capacity = capacity
        self.dim = dim
        self._lock = threading.Lock()
        self._size = 0
        self._next = 0
        self._obs = self._nxt = None
        self._act = np.zeros(capacity, dtype=np.int64)
        self._rew = np.zeros(capacity, dtype=np.float32)
        self._term = np.zeros(capacity, dtype=bool)

    def __len__(self) -> int:
        return self._size

    def append(self, e: Experience) -> None:
        with self._lock:
            if self._obs is None:
                dim = self.dim or len(e.obs)
                self._obs = np.zeros((self.capacity, dim), dtype=np.float32)
                self._nxt = np.zeros((self.capacity, dim), dtype=np.float32)
            i = self._next
            self._obs[i], self._nxt[i] = e.obs, e.next_obs
            self._act[i], self._rew[i], self._term[i] = e.action, e.reward, e.terminal
            self._next = (i + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if self._size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self._size, size=n)
        return {
            "obs": self._obs[idx], "action": self._act[idx], "reward": self._rew[idx],
            "next_obs": self._nxt[idx], "terminal": self._term[idx],
        }


@dataclass
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.1
    decay_epochs: int = 300
    kappa: float = 0.5

    def epsilon(self, epoch: int) -> float:
        if self.decay_epochs <= 0:
            return self.end
        frac = min(max(epoch, 0) / self.decay_epochs, 1.0)
        return self.start + (self.end - self.start) * frac


# -- Q network ------------------------------------------------------------------------------


@dataclass
class QNetwork:
    spec: NetworkSpec
    params: ParameterSet
    target: ParameterSet

    @classmethod
    def create(cls, embedding_dim: int, hidden: int = 512, hidden_layers: int = 2, seed=0) -> QNetwork:
        spec = presets.mlp(embedding_dim, hidden, N_ACTIONS, hidden_layers)
        params = init_params(spec, seed)
        return cls(spec, params, params.copy())

    def sync_target(self) -> None:
        self.target = self.params.copy()


def q_values(obs: np.ndarray, spec: NetworkSpec, params: ParameterSet) -> np.ndarray:
    """Q-values for one observation (returns shape (9,)) or a batch (N, 9)."""
    obs = np.asarray(obs, dtype=params.arrays()[0].dtype)
    single = obs.ndim == 1
    if single:
        obs = obs[None]
    if obs.shape[1:] != tuple(spec.input_shape):
        raise ValueError(f"embedding dimension {obs.shape[1:]} != Q-network input {tuple(spec.input_shape)}")
    with no_grad():
        q = forward(spec, params, obs).data
    return q[0] if single else q


def td_loss(batch: dict, spec: NetworkSpec, params: ParameterSet, target: ParameterSet, gamma: float = 0.9,
            with_grads: bool = True):
    """Mean squared Bellman error; the bootstrap term is dropped for terminal tuples.

    Returns ``(loss, grads)``; gradients flow through Q(o, a; params) only.
    """
    n = len(batch["action"])
    if n == 0:
        raise ValueError("empty batch")
    q_next = q_values(batch["next_obs"], spec, target)
    boot = np.where(batch["terminal"], 0.0, gamma * q_next.max(axis=1))
    tgt = Array((batch["reward"] + boot).astype(np.float32).reshape(-1, 1))
    dtype = params.arrays()[0].dtype
    onehot = np.zeros((n, N_ACTIONS), dtype=dtype)
    onehot[np.arange(n), batch["action"]] = 1.0
    q = forward(spec, params, np.asarray(batch["obs"], dtype=dtype))
    q_sa = (q * Array(onehot)).sum(axis=1, keepdims=True)
    diff = tgt - q_sa
    loss = (diff * diff).mean()
    grads = backward(loss, params) if with_grads else None
    return loss, grads


# -- environments ---------------------------------------------------------------------------


class SearchEnv(Protocol):
    """Episode interface used by the Q-learning loop."""

    def start(self): ...

    def observe(self, state) -> np.ndarray: ...

    def step(self, state, action: int): ...  # -> (next_state, reward)


class BreastSearchEnv:
    """One breast volume; Dice is measured against the best-matching lesion."""

    def __init__(self, volume: np.ndarray, masks: Sequence[np.ndarray], cache: EmbeddingCache, key,
                 eta: float = ETA, trigger_dice: float = TRIGGER_DICE, init_fraction: float = 0.75):
        self.volume = volume
        self.masks = list(masks)
        self.cache = cache
        self.key = key
        self.eta = eta
        self.trigger_dice = trigger_dice
        self.lattice = volume.shape
        self.init_fraction = init_fraction
        self._dice: dict[BoundingVolume, float] = {}

    def start(self) -> BoundingVolume:
        return centred_box(self.lattice, self.init_fraction)

    def dice(self, box: BoundingVolume) -> float:
        d = self._dice.get(box)
        if d is None:
            d = self._dice[box] = best_dice(box, self.masks)
        return d

    def observe(self, box: BoundingVolume) -> np.ndarray:
        return self.cache.get(self.key, self.volume, box)

    def observe_many(self, boxes: Sequence[BoundingVolume]) -> np.ndarray:
        return self.cache.get_many(self.key, self.volume, boxes)

    def step(self, box: BoundingVolume, action: int):
        a = Action(action)
        nxt = box if a == Action.TRIGGER else apply_action(box, a, self.lattice)
        return nxt, step_reward(self.dice(box), a, self.dice(nxt), self.eta, self.trigger_dice)


def select_action(obs: np.ndarray, q: QNetwork, epsilon: float, kappa: float, rng: np.random.Generator,
                  lookahead: Callable[[int], float] | None = None) -> int:
    """Modified epsilon-greedy.

    With probability 1 - epsilon the greedy action; otherwise, with probability
    kappa a uniform action and with probability 1 - kappa a uniform choice among
    actions whose one-step reward is positive (uniform over all if none is).
    """
    if rng.random() >= epsilon:
        return int(np.argmax(q_values(obs, q.spec, q.params)))
    if rng.random() < kappa or lookahead is None:
        return int(rng.integers(N_ACTIONS))
    good = [a for a in range(N_ACTIONS) if lookahead(a) > 0]
    if not good:
        return int(rng.integers(N_ACTIONS))
    return int(good[rng.integers(len(good))])


@dataclass
class QLearningConfig:
    gamma: float = 0.9
    lr: float = 1e-4
    batch_size: int = 100
    replay_capacity: int = 10_000
    max_steps: int = 20
    updates_per_step: int = 1
    schedule: EpsilonSchedule = field(default_factory=EpsilonSchedule)


@dataclass
class EpochStats:
    epoch: int
    epsilon: float
    episodes: int = 0
    steps: int = 0
    triggers: int = 0
    good_triggers: int = 0
    mean_loss: float = float("nan")


class QLearner:
    """Replay memory + target network + modified epsilon-greedy around a ``QNetwork``."""

    def __init__(self, q: QNetwork, config: QLearningConfig, rng: np.random.Generator):
        self.q = q
        self.config = config
        self.rng = rng
        self.buffer = ReplayBuffer(config.replay_capacity)
        self.opt = AdamState()
        self.updates = 0

    def learn(self) -> float | None:
        c = self.config
        if len(self.buffer) < min(c.batch_size, self.buffer.capacity):
            return None
        batch = self.buffer.sample(c.batch_size, self.rng)
        loss, grads = td_loss(batch, self.q.spec, self.q.params, self.q.target, c.gamma)
        if not np.isfinite(loss.data):
            raise NonFiniteGradient(["td_loss"])
        adam_step(self.q.params, grads, self.opt, c.lr)
        self.updates += 1
        return float(loss.data)

    def run_episode(self, env: SearchEnv, epsilon: float, stats: EpochStats | None = None) -> list[Experience]:
        c = self.config
        state = env.start()
        obs = env.observe(state)
        episode = []
        losses = []
        for t in range(c.max_steps):
            a = select_action(obs, self.q, epsilon, c.schedule.kappa, self.rng,
                              lookahead=lambda act, s=state: env.step(s, act)[1])
            nxt, r = env.step(state, a)
            nxt_obs = obs if a == Action.TRIGGER else env.observe(nxt)
            terminal = a == Action.TRIGGER or t == c.max_steps - 1
            e = Experience(obs, a, r, nxt_obs, terminal)
            self.buffer.append(e)
            episode.append(e)
            for _ in range(c.updates_per_step):
                loss = self.learn()
                if loss is not None:
                    losses.append(loss)
            if stats is not None:
                stats.steps += 1
                if a == Action.TRIGGER:
                    stats.triggers += 1
                    stats.good_triggers += int(r > 0)
            if a == Action.TRIGGER:
                break
            state, obs = nxt, nxt_obs
        if stats is not None:
            stats.episodes += 1
            if losses:
                prev = 0.0 if np.isnan(stats.mean_loss) else stats.mean_loss * (stats.episodes - 1)
                stats.mean_loss = (prev + float(np.mean(losses))) / stats.episodes
        return episode

    def run_epoch(self, envs: Sequence[SearchEnv], epoch: int) -> EpochStats:
        """One episode per environment, then the target network takes the current weights."""
        eps = self.config.schedule.epsilon(epoch)
        stats = EpochStats(epoch, eps)
        for i in self.rng.permutation(len(envs)):
            self.run_episode(envs[i], eps, stats)
        self.q.sync_target()
        return stats


def greedy_rollout(env: SearchEnv, q: QNetwork, max_steps: int = 20):
    """Follow argmax-Q from the start state; returns (final state, triggered, steps)."""
    state = env.start()
    for t in range(max_steps):
        a = int(np.argmax(q_values(env.observe(state), q.spec, q.params)))
        if a == Action.TRIGGER:
            return state, True, t + 1
        state, _ = env.step(state, a)
    return state, False, max_steps


# -- inference ---------------------------------------------------------------------------------


@dataclass
class Detection:
    box: BoundingVolume
    score: float  # Q-value of the trigger action at the final box


def merge_detections(dets: Sequence[Detection], merge_dice: float = 0.5) -> list[Detection]:
    """Keep the highest-scoring box among any group with pairwise Dice >= ``merge_dice``."""
    kept: list[Detection] = []
    for d in sorted(dets, key=lambda d: (-d.score, d.box)):
        if all(dice(d.box, k.box) < merge_dice for k in kept):
            kept.append(d)
    return kept


def detect(volume: np.ndarray, q: QNetwork, cache: EmbeddingCache, key=None, max_steps: int = 20,
           merge_dice: float | None = 0.5, starts: Sequence[BoundingVolume] | None = None) -> list[Detection]:
    """Greedy search from the 13 starting boxes; each triggered episode yields one detection."""
    lattice = volume.shape
    boxes = list(starts) if starts is not None else inference_boxes(lattice)
    key = key if key is not None else id(volume)
    active = list(range(len(boxes)))
    raw: list[Detection] = []
    for _ in range(max_steps):
        if not active:
            break
        obs = cache.get_many(key, volume, [boxes[i] for i in active])
        qs = q_values(obs, q.spec, q.params)
        still = []
        for i, qrow in zip(active, qs):
            a = int(np.argmax(qrow))
            if a == Action.TRIGGER:
                raw.append(Detection(boxes[i], float(qrow[Action.TRIGGER])))
            else:
                boxes[i] = apply_action(boxes[i], a, lattice)
                still.append(i)
        active = still
    if merge_dice is None:
        return raw
    return merge_detections(raw, merge_dice)


def write_detections_csv(path, rows: Sequence[tuple[str, Detection]]) -> None:
    """``breast_id, x0, y0, z0, x1, y1, z1, score`` per detection."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["breast_id", "x0", "y0", "z0", "x1", "y1", "z1", "score"])
        for bid, d in rows:
            w.writerow([bid, *d.box, repr(float(d.score))])


def read_detections_csv(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            box = BoundingVolume(*(int(row[k]) for k in ("x0", "y0", "z0", "x1", "y1", "z1")))
            out.setdefault(row["breast_id"], []).append(Detection(box, float(row["score"])))
    return out


# -- detector training ---------------------------------------------------------------------------


@dataclass
class DetectorConfig:
    epochs: int = 60
    hidden: int = 128
    hidden_layers: int = 2
    val_every: int = 5
    merge_dice: float = 0.5
    max_fpp: float = 3.0
    learning: QLearningConfig = field(default_factory=lambda: QLearningConfig(
        schedule=EpsilonSchedule(decay_epochs=40)))


@dataclass
class DetectorResult:
    q: QNetwork
    best_epoch: int
    best_score: float
    history: list[EpochStats]


def _envs(samples, cache: EmbeddingCache, cfg: QLearningConfig):
    return [BreastSearchEnv(s.volume, s.masks, cache, s.breast_id) for s in samples]


def validation_score(samples, q: QNetwork, cache: EmbeddingCache, config: DetectorConfig) -> float:
    """Lesion TPR at <= ``max_fpp`` false positives per patient on the validation breasts."""
    from ..metrics import froc, sensitivity_at

    return sensitivity_at(froc(detection_cases(samples, q, cache, config)), config.max_fpp)


def detection_cases(samples, q: QNetwork, cache: EmbeddingCache, config: DetectorConfig):
    """Run ``detect`` on every breast and group results per patient as FROC cases."""
    from ..metrics import FrocCase, Tagged

    cases: dict[str, FrocCase] = {}
    for s in samples:
        dets = detect(s.volume, q, cache, s.breast_id, config.learning.max_steps, config.merge_dice)
        c = cases.setdefault(s.patient_id, FrocCase([], [], [], [], patient_id=s.patient_id))
        c.regions += [Tagged(s.breast_id, d.box) for d in dets]
        c.scores += [d.score for d in dets]
        c.lesions += [Tagged(s.breast_id, m) for m in s.masks]
        c.target += [True] * len(s.masks)
    return list(cases.values())


def train_detector(trainset, valset, encoder: PatchEncoder, config: DetectorConfig = DetectorConfig(), seed: int = 0,
                   checkpoint_dir=None, cache: EmbeddingCache | None = None) -> DetectorResult:
    """Train the Q-network; keeps the parameters with the best validation detection score."""
    rng = np.random.default_rng(seed)
    cache = cache or EmbeddingCache(encoder)
    q = QNetwork.create(encoder.embedding_dim, config.hidden, config.hidden_layers, rng)
    learner = QLearner(q, config.learning, rng)
    envs = _envs(trainset, cache, config.learning)
    best = (-1.0, -1, q.params.copy())
    history = []
    for epoch in range(config.epochs):
        try:
            stats = learner.run_epoch(envs, epoch)
        except NonFiniteGradient:
            log.error("non-finite TD loss at epoch %d; keeping last finite parameters", epoch)
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / "dqn_last_finite.ckpt", q.spec, q.target)
            q.params = q.target.copy()
            break
        history.append(stats)
        log.info("epoch %d eps %.2f triggers %d/%d loss %.4f", epoch, stats.epsilon, stats.good_triggers,
                 stats.triggers, stats.mean_loss)
        last = epoch == config.epochs - 1
        if valset and ((epoch + 1) % config.val_every == 0 or last):
            score = validation_score(valset, q, cache, config)
            log.info("epoch %d validation TPR@%.1fFPP %.3f", epoch, config.max_fpp, score)
            if score >= best[0]:
                best = (score, epoch, q.params.copy())
    if best[1] >= 0:
        q.params = best[2]
    q.sync_target()
    return DetectorResult(q, best[1], best[0], history)
