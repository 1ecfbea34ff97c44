"""Trace collection: count-balanced pure exploration and Q-learning sampling.

Both samplers key their statistics on the current state space: observations
alone before any machine is learned, (observation, machine state) afterwards.
After a new machine is learned the statistics are rekeyed, which discards the
old counts and Q values rather than projecting them.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Sequence

from .core import Action, MealyMachine, Observation, RdplearnError, Step, Trace, InputSymbol
from .core import UndefinedTransitionError
from .envs import Env, export_traces_csv, import_traces_csv

StateKey = object  # Observation, or (Observation, mealy state index)


@dataclass
class SampleStats:
    """Visit counts n(key, action); counts only grow within one keying epoch."""

    counts: dict[tuple, int] = field(default_factory=dict)
    total: int = 0

    def count(self, key: StateKey, action: Action) -> int:
        return self.counts.get((key, action), 0)

    def add(self, key: StateKey, action: Action):
        self.counts[(key, action)] = self.counts.get((key, action), 0) + 1
        self.total += 1

    def action_counts(self, key: StateKey, num_actions: int) -> list[int]:
        return [self.count(key, a) for a in range(num_actions)]


@dataclass
class QTable:
    """Tabular action values with the standard one-step Q-learning update."""

    alpha: float = 0.1
    epsilon: float = 0.1
    gamma: float = 0.95
    values: dict[tuple, float] = field(default_factory=dict)

    def q(self, key: StateKey, action: Action) -> float:
        return self.values.get((key, action), 0.0)

    def greedy(self, key: StateKey, num_actions: int) -> Action:
        best, best_q = 0, self.q(key, 0)
        for a in range(1, num_actions):
            qa = self.q(key, a)
            if qa > best_q:  # ties keep the lexicographically smallest action
                best, best_q = a, qa
        return best

    def update(self, key: StateKey, action: Action, reward: float,
               next_key: StateKey, num_actions: int, done: bool = False):
        target = reward
        if not done:
            target += self.gamma * max(self.q(next_key, a) for a in range(num_actions))
        old = self.q(key, action)
        self.values[(key, action)] = old + self.alpha * (target - old)


def exploration_policy(stats: SampleStats, key: StateKey, num_actions: int) -> list[float]:
    """Probabilities favoring less-sampled actions.

    f(a) = 1 - n(a)/sum(n), normalized by sum(f). With no counts yet the
    formula is 0/0, completed symmetrically as the uniform distribution.
    """
    if num_actions < 2:
        raise RdplearnError("need at least two actions")
    counts = stats.action_counts(key, num_actions)
    total = sum(counts)
    if total == 0:
        return [1.0 / num_actions] * num_actions
    favors = [1.0 - c / total for c in counts]
    favor_sum = sum(favors)
    return [f / favor_sum for f in favors]


def _draw(probs: Sequence[float], rng: random.Random) -> int:
    u = rng.random()
    acc = 0.0
    for i, p in enumerate(probs):
        acc += p
        if u < acc:
            return i
    return len(probs) - 1


class _MealyTracker:
    """Follows the machine along an episode; unknown symbols hold the state."""

    def __init__(self, machine: MealyMachine | None):
        self.machine = machine
        self.state = machine.initial_state if machine else 0

    def begin(self):
        self.state = self.machine.initial_state if self.machine else 0

    def key(self, obs: Observation) -> StateKey:
        return obs if self.machine is None else (obs, self.state)

    def advance(self, prev_obs: Observation, action: Action):
        if self.machine is None:
            return
        try:
            self.state, _ = self.machine.step(self.state, InputSymbol(prev_obs, action))
        except UndefinedTransitionError:
            pass


@dataclass
class SampleSet:
    """Accumulated training traces with the per-episode seeds that produced them."""

    traces: list[Trace] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)

    def add(self, trace: Trace, seed: int):
        self.traces.append(trace)
        self.seeds.append(seed)

    def __len__(self) -> int:
        return len(self.traces)

    def to_csv(self) -> str:
        return export_traces_csv(self.traces)

    @classmethod
    def from_csv(cls, text: str) -> "SampleSet":
        traces = import_traces_csv(text)
        return cls(traces, [0] * len(traces))


class Sampler:
    """Shared episode loop; subclasses pick actions and update their statistics."""

    def __init__(self, machine: MealyMachine | None = None):
        self.stats = SampleStats()
        self.tracker = _MealyTracker(machine)

    def rekey(self, machine: MealyMachine | None):
        """Switch to the product state space of a new machine; counts reset."""
        self.stats = SampleStats()
        self.tracker = _MealyTracker(machine)

    def _choose(self, key: StateKey, num_actions: int, rng: random.Random) -> Action:
        raise NotImplementedError

    def _learn(self, key, action, reward, next_key, num_actions, done):
        pass

    def run_episode(self, env: Env, horizon: int, env_seed: int,
                    rng: random.Random) -> Trace:
        obs = env.reset(env_seed)
        initial = obs
        self.tracker.begin()
        steps = []
        for _ in range(horizon):
            key = self.tracker.key(obs)
            action = self._choose(key, env.num_actions, rng)
            next_obs, reward = env.step(action)
            self.tracker.advance(obs, action)
            next_key = self.tracker.key(next_obs)
            self.stats.add(key, action)
            self._learn(key, action, reward, next_key, env.num_actions, env.done)
            steps.append(Step(action, reward, next_obs))
            obs = next_obs
            if env.done:
                break
        return Trace(initial, tuple(steps))


class PureExplorationSampler(Sampler):
    def _choose(self, key, num_actions, rng):
        return _draw(exploration_policy(self.stats, key, num_actions), rng)


class SmartSampler(Sampler):
    """Q-learning with count-balanced exploration on the same state keys."""

    def __init__(self, machine: MealyMachine | None = None, alpha: float = 0.1,
                 epsilon: float = 0.1, gamma: float = 0.95):
        super().__init__(machine)
        self.qtable = QTable(alpha, epsilon, gamma)

    def rekey(self, machine: MealyMachine | None):
        super().rekey(machine)
        self.qtable = QTable(self.qtable.alpha, self.qtable.epsilon, self.qtable.gamma)

    def _choose(self, key, num_actions, rng):
        if rng.random() < self.qtable.epsilon:
            return _draw(exploration_policy(self.stats, key, num_actions), rng)
        return self.qtable.greedy(key, num_actions)

    def _learn(self, key, action, reward, next_key, num_actions, done):
        self.qtable.update(key, action, reward, next_key, num_actions, done)


def smart_sample_step(qtable: QTable, stats: SampleStats, key: StateKey,
                      num_actions: int, rng: random.Random) -> Action:
    """One smart-sampler action: greedy with prob 1-eps, else count-balanced."""
    if rng.random() < qtable.epsilon:
        return _draw(exploration_policy(stats, key, num_actions), rng)
    return qtable.greedy(key, num_actions)


def rekey_stats(stats: SampleStats, qtable: QTable | None,
                machine: MealyMachine | None) -> tuple[SampleStats, QTable | None]:
    """Fresh statistics for the product state space of `machine`.

    Old counts and Q values conflate histories under the previous keying, so
    they are discarded rather than projected.
    """
    fresh_q = None
    if qtable is not None:
        fresh_q = QTable(qtable.alpha, qtable.epsilon, qtable.gamma)
    return SampleStats(), fresh_q


def sample_pure(env: Env, episodes: int, horizon: int, stats: SampleStats | None = None,
                machine: MealyMachine | None = None, seed: int = 0) -> SampleSet:
    """Collect episodes with the pure-exploration policy; stats update per step."""
    if episodes < 1:
        raise RdplearnError("episodes must be >= 1")
    sampler = PureExplorationSampler(machine)
    if stats is not None:
        sampler.stats = stats
    sample = SampleSet()
    rng = random.Random(seed)
    for ep in range(episodes):
        env_seed = rng.getrandbits(63)
        trace = sampler.run_episode(env, horizon, env_seed, rng)
        sample.add(trace, env_seed)
    return sample
