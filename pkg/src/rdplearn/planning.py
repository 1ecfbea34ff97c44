"""Turning a Mealy machine plus label table into decisions.

The machine-as-generative-model is flattened into a ProductMDP over
(observation, machine state) pairs: explicit successor lists with
probabilities and rewards. Value iteration and the UCT kernel both run on the
flat arrays. Undefined (state, symbol) pairs of partial learned machines are
totalized with a conservative fallback: hold the machine state and emit the
most-sampled label whose affected-proposition mask matches what other states
report for the same symbol, or a reward-0 self-loop if the symbol was never
seen anywhere.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._kernels import backend_name, uct_search
from .clustering import OutcomeDistribution, apply_assignment
from .core import (Action, InputSymbol, MealyMachine, Observation, RdplearnError)
from .envs import MAZE, EnvConfig, make_env
from .seeding import PHASE_PLAN, derive_seed

LabelTable = dict[int, OutcomeDistribution]

IDENTITY_LABEL = OutcomeDistribution.from_probs(0, {((), 0.0): 1.0})


class MissingLabelError(RdplearnError):
    """The machine emitted a label id absent from the label table."""


def resolve_dynamics(machine: MealyMachine, labels: LabelTable):
    """Total (state, obs, action) -> (next state, OutcomeDistribution) resolver."""
    by_symbol: dict[InputSymbol, list[int]] = {}
    for (_state, sym), label in machine.outputs.items():
        by_symbol.setdefault(sym, []).append(label)

    def fallback_label(sym: InputSymbol) -> OutcomeDistribution:
        # the labels other machine states emit for this symbol share its
        # affected-proposition sets by construction; take the most-sampled one
        seen = by_symbol.get(sym)
        if not seen:
            return IDENTITY_LABEL
        candidates = sorted({(-labels[l].weight, l) for l in seen})
        return labels[candidates[0][1]]

    def resolve(state: int, obs: Observation, action: Action):
        sym = InputSymbol(obs, action)
        key = (state, sym)
        target = machine.transitions.get(key)
        if target is None:
            return state, fallback_label(sym)
        label = machine.outputs[key]
        if label not in labels:
            raise MissingLabelError(f"label {label} has no distribution")
        return target, labels[label]

    return resolve


@dataclass
class ProductMDP:
    """Explicit MDP over (observation, machine state) pairs, flattened.

    Row (s, a) occupies succ/prob/reward[row_start[s*A+a] : row_start[s*A+a+1]];
    rows are never empty and each sums to 1. Terminal states carry a reward-0
    self-loop and stop rollouts.
    """

    states: list[tuple[Observation, int]]
    num_actions: int
    row_start: np.ndarray
    succ: np.ndarray
    prob: np.ndarray
    reward: np.ndarray
    expected_reward: np.ndarray
    terminal: np.ndarray
    index: dict[tuple[Observation, int], int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {s: i for i, s in enumerate(self.states)}

    @property
    def num_states(self) -> int:
        return len(self.states)

    def state_id(self, obs: Observation, machine_state: int) -> int | None:
        return self.index.get((obs, machine_state))

    def transition_list(self, state: int, action: Action):
        lo = self.row_start[state * self.num_actions + action]
        hi = self.row_start[state * self.num_actions + action + 1]
        return [(int(self.succ[k]), float(self.prob[k]), float(self.reward[k]))
                for k in range(lo, hi)]


def build_product_mdp(machine: MealyMachine, labels: LabelTable,
                      obs_space: Sequence[Observation],
                      terminal_obs: Sequence[Observation] = ()) -> ProductMDP:
    """Flatten machine + labels into an explicit MDP.

    The state set is the closure of obs_space x machine states under the
    label dynamics: successor observations replace only the affected bits,
    machine states follow the deterministic transition (or hold via the
    fallback). `terminal_obs` states become absorbing with reward 0.
    """
    resolve = resolve_dynamics(machine, labels)
    terminal_set = set(terminal_obs)
    A = machine.num_actions

    seeds = sorted({(obs, s) for obs in obs_space for s in range(machine.num_states)})
    if not seeds:
        raise RdplearnError("obs_space must be non-empty")
    states: list[tuple[Observation, int]] = []
    index: dict[tuple[Observation, int], int] = {}

    def intern(key) -> int:
        if key not in index:
            index[key] = len(states)
            states.append(key)
        return index[key]

    rows: dict[tuple[int, int], list[tuple]] = {}
    worklist = [intern(s) for s in seeds]
    cursor = 0
    while cursor < len(states):
        sid = cursor
        cursor += 1
        obs, mstate = states[sid]
        if obs in terminal_set:
            for a in range(A):
                rows[(sid, a)] = [(sid, 1.0, 0.0)]
            continue
        for a in range(A):
            target, dist = resolve(mstate, obs, a)
            merged: dict[tuple[int, float], float] = {}
            for (assignment, r), p in sorted(dist.outcomes.items()):
                next_obs = apply_assignment(obs, dist.affected, assignment)
                nid = intern((next_obs, target))
                key = (nid, r)
                merged[key] = merged.get(key, 0.0) + p
            rows[(sid, a)] = [(nid, p, r) for (nid, r), p in merged.items()]

    S = len(states)
    row_start = np.zeros(S * A + 1, dtype=np.int64)
    succ, prob, reward = [], [], []
    expected = np.zeros(S * A, dtype=np.float64)
    for sid in range(S):
        for a in range(A):
            entries = rows[(sid, a)]
            for nid, p, r in entries:
                succ.append(nid)
                prob.append(p)
                reward.append(r)
                expected[sid * A + a] += p * r
            row_start[sid * A + a + 1] = len(succ)
    terminal = np.array([1 if obs in terminal_set else 0 for obs, _ in states],
                        dtype=np.uint8)
    return ProductMDP(states, A, row_start,
                      np.array(succ, dtype=np.int64),
                      np.array(prob, dtype=np.float64),
                      np.array(reward, dtype=np.float64),
                      expected, terminal, index)


def _value_iteration_arrays(row_start, succ, prob, reward, num_states: int,
                            num_actions: int, gamma: float, tol: float,
                            residuals: list[float] | None = None,
                            v0: np.ndarray | None = None):
    v = np.zeros(num_states, dtype=np.float64) if v0 is None else v0.copy()
    starts = row_start[:-1]
    while True:
        backup = prob * (reward + gamma * v[succ])
        q = np.add.reduceat(backup, starts).reshape(num_states, num_actions)
        v_new = q.max(axis=1)
        residual = float(np.max(np.abs(v_new - v))) if num_states else 0.0
        if residuals is not None:
            residuals.append(residual)
        v = v_new
        if residual < tol:
            break
    policy = q.argmax(axis=1)  # first max wins: lexicographic tie-break
    return v, policy


def value_iteration(mdp: ProductMDP, gamma: float, tol: float,
                    residuals: list[float] | None = None):
    """Bellman backups to sup-norm residual < tol; returns (values, greedy policy).

    Pass a list as `residuals` to collect the per-sweep sup-norm residuals.
    """
    if tol <= 0:
        raise RdplearnError("tol must be > 0")
    if not 0 < gamma < 1:
        raise RdplearnError("gamma must be in (0, 1)")
    return _value_iteration_arrays(mdp.row_start, mdp.succ, mdp.prob, mdp.reward,
                                   mdp.num_states, mdp.num_actions, gamma, tol,
                                   residuals)


class UctPlanner:
    """Online UCT decisions over a fixed ProductMDP."""

    def __init__(self, mdp: ProductMDP, iterations: int = 500,
                 c: float = math.sqrt(2.0), gamma: float = 0.95):
        if iterations < 1:
            raise RdplearnError("iterations must be >= 1")
        self.mdp = mdp
        self.iterations = iterations
        self.c = c
        self.gamma = gamma

    def plan(self, state_id: int, depth: int, seed: int) -> Action:
        action, _, _ = uct_search(
            self.mdp.row_start, self.mdp.succ, self.mdp.prob, self.mdp.reward,
            self.mdp.terminal, self.mdp.num_actions, state_id, self.iterations,
            self.c, depth, self.gamma, seed)
        return action


def uct_plan(machine: MealyMachine, labels: LabelTable,
             root: tuple[Observation, int], iterations: int, c: float,
             depth: int, gamma: float, seed: int = 0,
             obs_space: Sequence[Observation] | None = None,
             terminal_obs: Sequence[Observation] = ()):
    """One-shot UCT decision; returns (action, root visit counts, root values)."""
    obs, mstate = root
    mdp = build_product_mdp(machine, labels, obs_space or [obs], terminal_obs)
    sid = mdp.state_id(obs, mstate)
    if sid is None:
        raise RdplearnError("root state missing from the product MDP")
    return uct_search(mdp.row_start, mdp.succ, mdp.prob, mdp.reward, mdp.terminal,
                      mdp.num_actions, sid, iterations, c, depth, gamma, seed)


# ---------------------------------------------------------------------------
# R-max baseline (Markovian, on raw observations)
# ---------------------------------------------------------------------------

class RmaxAgent:
    """Optimistic model-based learner that treats observations as Markov state.

    Unknown (obs, action) pairs route to a fictitious absorbing state worth
    r_max forever; a pair becomes known at K visits, at which point its row is
    set to the empirical transition distribution (the classic semantics of the
    algorithm: known rows are not revised afterwards). Rewards are recorded on
    first observation. The greedy policy is recomputed by value iteration
    whenever the model changed, warm-started from the last values.
    """

    def __init__(self, num_actions: int, known_threshold: int = 10,
                 r_max: float = 1.0, gamma: float = 0.95, tol: float = 1e-4):
        self.num_actions = num_actions
        self.K = known_threshold
        self.r_max = r_max
        self.gamma = gamma
        self.tol = tol
        self.obs_order: list[Observation] = []
        self.visits: dict[tuple[Observation, Action], int] = {}
        self.trans_counts: dict[tuple[Observation, Action], dict[Observation, int]] = {}
        self.first_reward: dict[tuple[Observation, Action], float] = {}
        self.known_rows: dict[tuple[Observation, Action], list[tuple[Observation, float]]] = {}
        self._dirty = True
        self._policy: dict[Observation, Action] = {}
        self._values: dict[Observation, float] = {}
        self._warm: np.ndarray | None = None

    def known(self, obs: Observation, action: Action) -> bool:
        return (obs, action) in self.known_rows

    def _note_obs(self, obs: Observation):
        if obs not in self.obs_order:
            self.obs_order.append(obs)
            self._dirty = True
            self._warm = None  # state space changed

    def update(self, obs: Observation, action: Action, reward: float,
               next_obs: Observation):
        self._note_obs(obs)
        self._note_obs(next_obs)
        key = (obs, action)
        if key not in self.first_reward:
            self.first_reward[key] = reward
        self.visits[key] = self.visits.get(key, 0) + 1
        bucket = self.trans_counts.setdefault(key, {})
        bucket[next_obs] = bucket.get(next_obs, 0) + 1
        if key not in self.known_rows and self.visits[key] >= self.K:
            self.known_rows[key] = self.empirical_row(obs, action)
            self._dirty = True

    def act(self, obs: Observation) -> Action:
        self._note_obs(obs)
        if self._dirty:
            self._replan()
        return self._policy.get(obs, 0)

    def optimistic_values(self) -> dict[Observation, float]:
        if self._dirty:
            self._replan()
        return dict(self._values)

    def empirical_row(self, obs: Observation, action: Action) -> list[tuple[Observation, float]]:
        bucket = self.trans_counts.get((obs, action), {})
        total = sum(bucket.values())
        return [(o, c / total) for o, c in sorted(bucket.items())]

    def _replan(self):
        # States: seen observations plus the fictitious max-reward state.
        obs_list = list(self.obs_order)
        idx = {o: i for i, o in enumerate(obs_list)}
        fict = len(obs_list)
        S, A = fict + 1, self.num_actions
        row_start = np.zeros(S * A + 1, dtype=np.int64)
        succ, prob, reward = [], [], []
        for o in obs_list:
            for a in range(A):
                row = self.known_rows.get((o, a))
                if row is None:
                    succ.append(fict)
                    prob.append(1.0)
                    reward.append(self.r_max)
                else:
                    r = self.first_reward[(o, a)]
                    for nxt, p in row:
                        succ.append(idx[nxt])
                        prob.append(p)
                        reward.append(r)
                row_start[idx[o] * A + a + 1] = len(succ)
        for a in range(A):
            succ.append(fict)
            prob.append(1.0)
            reward.append(self.r_max)
            row_start[fict * A + a + 1] = len(succ)
        values, policy = _value_iteration_arrays(
            row_start, np.array(succ, dtype=np.int64),
            np.array(prob, dtype=np.float64), np.array(reward, dtype=np.float64),
            S, A, self.gamma, self.tol, v0=self._warm)
        self._warm = values
        self._policy = {o: int(policy[idx[o]]) for o in obs_list}
        self._values = {o: float(values[idx[o]]) for o in obs_list}
        self._dirty = False


def rmax_act(agent: RmaxAgent, obs: Observation) -> Action:
    return agent.act(obs)


def rmax_update(agent: RmaxAgent, obs: Observation, action: Action, reward: float,
                next_obs: Observation):
    agent.update(obs, action, reward, next_obs)


# ---------------------------------------------------------------------------
# Policies and evaluation
# ---------------------------------------------------------------------------

class Policy:
    """Episode-scoped decision procedure; subclasses override act()."""

    def begin(self, obs: Observation):
        pass

    def act(self, obs: Observation, steps_left: int, seed: int) -> Action:
        raise NotImplementedError

    def observe(self, prev_obs: Observation, action: Action, reward: float,
                next_obs: Observation):
        pass


class _MachinePolicy(Policy):
    """Shared machine tracking: hold the state on undefined transitions."""

    def __init__(self, machine: MealyMachine):
        self.machine = machine
        self.mstate = machine.initial_state

    def begin(self, obs: Observation):
        self.mstate = self.machine.initial_state

    def observe(self, prev_obs, action, reward, next_obs):
        key = (self.mstate, InputSymbol(prev_obs, action))
        target = self.machine.transitions.get(key)
        if target is not None:
            self.mstate = target


class UctPolicy(_MachinePolicy):
    def __init__(self, machine: MealyMachine, mdp: ProductMDP, iterations: int = 500,
                 c: float = math.sqrt(2.0), gamma: float = 0.95):
        super().__init__(machine)
        self.planner = UctPlanner(mdp, iterations, c, gamma)

    def act(self, obs, steps_left, seed):
        sid = self.planner.mdp.state_id(obs, self.mstate)
        if sid is None:  # observation the model never predicted
            return random.Random(seed).randrange(self.planner.mdp.num_actions)
        return self.planner.plan(sid, steps_left, seed)


class GreedyProductPolicy(_MachinePolicy):
    """Greedy table from value iteration over the product MDP."""

    def __init__(self, machine: MealyMachine, mdp: ProductMDP, gamma: float = 0.95,
                 tol: float = 1e-6):
        super().__init__(machine)
        self.mdp = mdp
        _, self.table = value_iteration(mdp, gamma, tol)

    def act(self, obs, steps_left, seed):
        sid = self.mdp.state_id(obs, self.mstate)
        if sid is None:
            return 0
        return int(self.table[sid])


class RmaxPolicy(Policy):
    """Evaluation wrapper around a (frozen) R-max agent."""

    def __init__(self, agent: RmaxAgent, learn: bool = False):
        self.agent = agent
        self.learn = learn

    def act(self, obs, steps_left, seed):
        return self.agent.act(obs)

    def observe(self, prev_obs, action, reward, next_obs):
        if self.learn:
            self.agent.update(prev_obs, action, reward, next_obs)


class FixedActionPolicy(Policy):
    def __init__(self, action: Action):
        self.action = action

    def act(self, obs, steps_left, seed):
        return self.action


class RandomPolicy(Policy):
    def __init__(self, num_actions: int):
        self.num_actions = num_actions

    def act(self, obs, steps_left, seed):
        return random.Random(seed).randrange(self.num_actions)


@dataclass(frozen=True)
class EvalResult:
    mean_per_step: float
    std: float
    per_trial_returns: tuple[float, ...]
    per_trial_steps: tuple[int, ...]
    per_trial_reached: tuple[bool, ...]

    @property
    def reach_rate(self) -> float:
        return sum(self.per_trial_reached) / len(self.per_trial_reached)


def evaluate_policy(cfg: EnvConfig, policy: Policy, trials: int, horizon: int,
                    seed: int = 0, seed_path: tuple[int, ...] = (PHASE_PLAN,)) -> EvalResult:
    """Run fresh seeded episodes; mean per-step reward = total reward / total steps."""
    if trials < 1:
        raise RdplearnError("trials must be >= 1")
    env = make_env(cfg)
    returns, steps_taken, reached = [], [], []
    total_reward = 0.0
    total_steps = 0
    for trial in range(trials):
        obs = env.reset(derive_seed(seed, *seed_path, trial, 0))
        policy.begin(obs)
        ep_reward = 0.0
        t = 0
        while t < horizon and not env.done:
            action = policy.act(obs, horizon - t, derive_seed(seed, *seed_path, trial, 1, t))
            next_obs, reward = env.step(action)
            policy.observe(obs, action, reward, next_obs)
            ep_reward += reward
            obs = next_obs
            t += 1
        returns.append(ep_reward)
        steps_taken.append(t)
        reached.append(env.cfg.kind == MAZE and env.done)
        total_reward += ep_reward
        total_steps += t
    per_step = [r / s if s else 0.0 for r, s in zip(returns, steps_taken)]
    mean = total_reward / total_steps if total_steps else 0.0
    variance = sum((x - mean) ** 2 for x in per_step) / trials
    return EvalResult(mean, math.sqrt(variance), tuple(returns), tuple(steps_taken),
                      tuple(reached))


def kernel_backend() -> str:
    return backend_name()
