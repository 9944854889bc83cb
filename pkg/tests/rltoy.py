"""Q-learning on the 1-D interval environment; shared by the unit and acceptance suites."""

from __future__ import annotations

import numpy as np

from artifact.detect.dqn import EpsilonSchedule, QLearner, QLearningConfig, QNetwork, greedy_rollout
from artifact.detect.env import TRIGGER_DICE
from artifact.detect.toy import IntervalEnv, edge_target


def toy_run(seed: int, episodes: int = 200, length: int = 40, lr: float = 0.05) -> tuple[bool, IntervalEnv, object]:
    """Train a linear (tabular over one-hot states) Q-network; True if the greedy policy triggers on the target."""
    rng = np.random.default_rng(seed)
    env = IntervalEnv(length, edge_target(rng, length))
    q = QNetwork.create(env.n_states, 0, hidden_layers=0, seed=rng)
    cfg = QLearningConfig(lr=lr, batch_size=32, schedule=EpsilonSchedule(decay_epochs=120))
    learner = QLearner(q, cfg, rng)
    for ep in range(episodes):
        learner.run_epoch([env], ep)
    final, triggered, _ = greedy_rollout(env, q)
    return triggered and env.dice(final) >= TRIGGER_DICE, env, final
