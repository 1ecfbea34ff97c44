"""The four non-Markovian benchmark domains as seeded generative simulators.

Each environment draws exactly one uniform per step from its own RNG stream,
so episodes are bit-reproducible given (seed, action sequence) and tests can
sample conditional outcome frequencies by pinning the internal state.

`ground_truth_mealy` builds, per domain, the Mealy machine and label table
that reproduce the simulator's exact transition probabilities and rewards;
these serve as oracles for clustering, learning, and planning tests.
"""

from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass, field
from typing import Sequence

from .core import (Action, ConfigError, InputSymbol, MealyMachine, Observation,
                   RdplearnError, Step, Trace)
from .clustering import Outcome, OutcomeDistribution, diff_mask, project_obs

ROTATING_MAB = "rotating_mab"
MALFUNCTION_MAB = "malfunction_mab"
CHEAT_MAB = "cheat_mab"
MAZE = "maze"

# Maze actions; movement is on screen coordinates, (0, 0) top-left.
UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
_MOVE = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}
_CLOCKWISE = {UP: RIGHT, RIGHT: DOWN, DOWN: LEFT, LEFT: UP}
_OPPOSITE = {UP: DOWN, DOWN: UP, LEFT: RIGHT, RIGHT: LEFT}


class EpisodeFinishedError(RdplearnError):
    """step() was called on a finished episode."""


@dataclass(frozen=True)
class EnvConfig:
    kind: str
    win_probs: tuple[float, ...] = ()
    malfunction_k: int = 3
    cheat_sequence: tuple[Action, ...] = (1, 1, 0)
    grid_size: int = 4
    start: tuple[int, int] = (0, 0)
    goal: tuple[int, int] = (3, 2)
    slip_prob: float = 0.1
    rotate_every: int = 3  # 0 disables rotation (Markovian ablation)
    episode_horizon: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (ROTATING_MAB, MALFUNCTION_MAB, CHEAT_MAB, MAZE):
            raise ConfigError(f"unknown domain kind {self.kind!r}")
        if self.episode_horizon < 1:
            raise ConfigError("episode_horizon must be >= 1")
        if self.kind in (ROTATING_MAB, MALFUNCTION_MAB, CHEAT_MAB):
            if len(self.win_probs) < 2:
                raise ConfigError("MAB domains need at least two arms")
            if any(not 0.0 <= p <= 1.0 for p in self.win_probs):
                raise ConfigError("win probabilities must be in [0, 1]")
        if self.kind == MALFUNCTION_MAB and self.malfunction_k < 1:
            raise ConfigError("malfunction_k must be >= 1")
        if self.kind == CHEAT_MAB:
            if not self.cheat_sequence:
                raise ConfigError("cheat_sequence must be non-empty")
            if any(not 0 <= a < len(self.win_probs) for a in self.cheat_sequence):
                raise ConfigError("cheat_sequence actions out of range")
        if self.kind == MAZE:
            if self.grid_size < 2:
                raise ConfigError("grid_size must be >= 2")
            if not 0.0 <= self.slip_prob <= 1.0:
                raise ConfigError("slip_prob must be in [0, 1]")
            if self.rotate_every < 0:
                raise ConfigError("rotate_every must be >= 0 (0 = no rotation)")
            for name, (x, y) in (("start", self.start), ("goal", self.goal)):
                if not (0 <= x < self.grid_size and 0 <= y < self.grid_size):
                    raise ConfigError(f"{name} {x, y} outside the grid")
            if self.start == self.goal:
                raise ConfigError("start and goal must differ")

    @classmethod
    def rotating_mab(cls, win_probs=(0.9, 0.2), horizon=10, seed=0):
        return cls(ROTATING_MAB, win_probs=tuple(win_probs), episode_horizon=horizon, seed=seed)

    @classmethod
    def malfunction_mab(cls, win_probs=(0.8, 0.2), k=3, horizon=10, seed=0):
        return cls(MALFUNCTION_MAB, win_probs=tuple(win_probs), malfunction_k=k,
                   episode_horizon=horizon, seed=seed)

    @classmethod
    def cheat_mab(cls, win_probs=(0.2, 0.2), sequence=(1, 1, 0), horizon=10, seed=0):
        return cls(CHEAT_MAB, win_probs=tuple(win_probs), cheat_sequence=tuple(sequence),
                   episode_horizon=horizon, seed=seed)

    @classmethod
    def maze(cls, grid_size=4, start=(0, 0), goal=(3, 2), slip_prob=0.1,
             rotate_every=3, horizon=15, seed=0):
        return cls(MAZE, grid_size=grid_size, start=start, goal=goal, slip_prob=slip_prob,
                   rotate_every=rotate_every, episode_horizon=horizon, seed=seed)

    @property
    def num_actions(self) -> int:
        return 4 if self.kind == MAZE else len(self.win_probs)

    @property
    def obs_width(self) -> int:
        if self.kind == MAZE:
            return 2 * _coord_bits(self.grid_size)
        return 1

    @property
    def terminal_observations(self) -> tuple[Observation, ...]:
        if self.kind == MAZE:
            return (maze_obs(self.goal[0], self.goal[1], _coord_bits(self.grid_size)),)
        return ()

    def observation_space(self) -> tuple[Observation, ...]:
        """Every observation the domain can emit."""
        if self.kind == MAZE:
            bits = _coord_bits(self.grid_size)
            return tuple(maze_obs(x, y, bits)
                         for x in range(self.grid_size) for y in range(self.grid_size))
        return (MAB_LOST, MAB_WON)


@dataclass(frozen=True)
class EpisodeOutcome:
    trace: Trace
    total_reward: float
    reached_goal: bool = False


def _coord_bits(grid_size: int) -> int:
    return max(1, (grid_size - 1).bit_length())


def _int_bits(value: int, width: int) -> tuple[int, ...]:
    return tuple((value >> (width - 1 - i)) & 1 for i in range(width))


def maze_obs(x: int, y: int, bits_per_coord: int) -> Observation:
    return Observation(_int_bits(x, bits_per_coord) + _int_bits(y, bits_per_coord))


MAB_LOST = Observation((0,))
MAB_WON = Observation((1,))


class Env:
    """Base simulator: reset() then step(action) until done or the caller stops."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.num_actions = cfg.num_actions
        self.obs_width = cfg.obs_width
        self.rng = random.Random(cfg.seed)
        self.done = False

    def reset(self, seed: int | None = None) -> Observation:
        if seed is not None:
            self.rng = random.Random(seed)
        self.done = False
        return self._reset_state()

    def step(self, action: Action) -> tuple[Observation, float]:
        if self.done:
            raise EpisodeFinishedError("episode already finished")
        if not 0 <= action < self.num_actions:
            raise ConfigError(f"action {action} out of range")
        return self._step(action)

    def _reset_state(self) -> Observation:
        raise NotImplementedError

    def _step(self, action: Action) -> tuple[Observation, float]:
        raise NotImplementedError


class RotatingMabEnv(Env):
    """Arm win probabilities shift right one slot after every win."""

    def _reset_state(self):
        self.offset = 0
        return MAB_LOST

    def effective_win_probs(self) -> tuple[float, ...]:
        wp = self.cfg.win_probs
        n = len(wp)
        return tuple(wp[(a + self.offset) % n] for a in range(n))

    def _step(self, action):
        p = self.cfg.win_probs[(action + self.offset) % len(self.cfg.win_probs)]
        if self.rng.random() < p:
            self.offset = (self.offset + 1) % len(self.cfg.win_probs)
            return MAB_WON, 1.0
        return MAB_LOST, 0.0


class MalfunctionMabEnv(Env):
    """Arm 0 breaks for one turn after every k-th pull."""

    def _reset_state(self):
        self.pulls = 0
        self.malfunction = False
        return MAB_LOST

    def _step(self, action):
        if self.malfunction:
            p = 0.0 if action == 0 else self.cfg.win_probs[action]
            self.malfunction = False
            self.pulls = 0
        else:
            p = self.cfg.win_probs[action]
            if action == 0:
                self.pulls += 1
                if self.pulls == self.cfg.malfunction_k:
                    self.malfunction = True
                    self.pulls = 0
        won = self.rng.random() < p
        return (MAB_WON, 1.0) if won else (MAB_LOST, 0.0)


def kmp_transitions(pattern: Sequence[int], num_symbols: int) -> list[list[int]]:
    """delta[p][a] = longest prefix of `pattern` that suffixes (match p) + a."""
    length = len(pattern)
    fail = [0] * length
    k = 0
    for i in range(1, length):
        while k and pattern[i] != pattern[k]:
            k = fail[k - 1]
        if pattern[i] == pattern[k]:
            k += 1
        fail[i] = k
    delta = [[0] * num_symbols for _ in range(length)]
    for p in range(length):
        for a in range(num_symbols):
            k = p
            while k and pattern[k] != a:
                k = fail[k - 1]
            delta[p][a] = k + 1 if pattern[k] == a else 0
    return delta


class CheatMabEnv(Env):
    """Once the cheat action sequence occurs anywhere in history, every pull wins."""

    def __init__(self, cfg):
        super().__init__(cfg)
        self._delta = kmp_transitions(cfg.cheat_sequence, cfg.num_actions)

    def _reset_state(self):
        self.progress = 0
        self.unlocked = False
        return MAB_LOST

    def _step(self, action):
        p = 1.0 if self.unlocked else self.cfg.win_probs[action]
        if not self.unlocked:
            self.progress = self._delta[self.progress][action]
            if self.progress == len(self.cfg.cheat_sequence):
                self.unlocked = True
                self.progress = 0
        won = self.rng.random() < p
        return (MAB_WON, 1.0) if won else (MAB_LOST, 0.0)


class MazeEnv(Env):
    """Grid navigation whose action frame rotates 90 degrees every few actions.

    The intended direction is first remapped clockwise by the current
    orientation; the remapped move then succeeds with prob 1 - slip_prob and
    goes the opposite way otherwise. Walls block. Reaching the goal pays 1
    and ends the episode.
    """

    def _reset_state(self):
        self.x, self.y = self.cfg.start
        self.action_count = 0
        return self._obs()

    def _obs(self):
        return maze_obs(self.x, self.y, _coord_bits(self.cfg.grid_size))

    def orientation_steps(self) -> int:
        if self.cfg.rotate_every == 0:
            return 0
        return (self.action_count // self.cfg.rotate_every) % 4

    def _step(self, action):
        resolved = action
        for _ in range(self.orientation_steps()):
            resolved = _CLOCKWISE[resolved]
        if self.rng.random() >= self.cfg.slip_prob:
            direction = resolved
        else:
            direction = _OPPOSITE[resolved]
        dx, dy = _MOVE[direction]
        nx, ny = self.x + dx, self.y + dy
        if 0 <= nx < self.cfg.grid_size and 0 <= ny < self.cfg.grid_size:
            self.x, self.y = nx, ny
        self.action_count += 1
        if (self.x, self.y) == self.cfg.goal:
            self.done = True
            return self._obs(), 1.0
        return self._obs(), 0.0


_ENV_CLASSES = {
    ROTATING_MAB: RotatingMabEnv,
    MALFUNCTION_MAB: MalfunctionMabEnv,
    CHEAT_MAB: CheatMabEnv,
    MAZE: MazeEnv,
}


def make_env(cfg: EnvConfig) -> Env:
    return _ENV_CLASSES[cfg.kind](cfg)


def run_episode(env: Env, choose, horizon: int, seed: int | None = None) -> EpisodeOutcome:
    """Drive one episode; `choose(obs, t)` picks the action at step t."""
    obs = env.reset(seed)
    steps = []
    initial = obs
    for t in range(horizon):
        action = choose(obs, t)
        obs, reward = env.step(action)
        steps.append(Step(action, reward, obs))
        if env.done:
            break
    trace = Trace(initial, tuple(steps))
    reached = env.cfg.kind == MAZE and env.done
    return EpisodeOutcome(trace, trace.total_reward, reached)


# ---------------------------------------------------------------------------
# Ground-truth Mealy machines
# ---------------------------------------------------------------------------

class _LabelBuilder:
    """Interns outcome distributions, handing out dense label ids."""

    def __init__(self):
        self.table: dict[int, OutcomeDistribution] = {}
        self._by_sig: dict[tuple, int] = {}

    def intern(self, dist: OutcomeDistribution) -> int:
        sig = dist.signature()
        if sig not in self._by_sig:
            label = len(self.table)
            self._by_sig[sig] = label
            self.table[label] = dist
        return self._by_sig[sig]


def _bernoulli_win_dist(p: float) -> OutcomeDistribution:
    # MAB outcomes: the "won" bit flips to the result, reward equals the bit.
    probs: dict[Outcome, float] = {}
    if p > 0.0:
        probs[((1,), 1.0)] = p
    if p < 1.0:
        probs[((0,), 0.0)] = 1.0 - p
    return OutcomeDistribution.from_probs(mask_for_width(1), probs)


def mask_for_width(width: int) -> int:
    return (1 << width) - 1


def _mab_symbols(num_actions: int):
    for obs in (MAB_LOST, MAB_WON):
        for a in range(num_actions):
            yield InputSymbol(obs, a)


def ground_truth_mealy(cfg: EnvConfig) -> tuple[MealyMachine, dict[int, OutcomeDistribution]]:
    """Hand-built machine + label table reproducing env_step's exact dynamics."""
    builder = _LabelBuilder()
    transitions: dict[tuple[int, InputSymbol], int] = {}
    outputs: dict[tuple[int, InputSymbol], int] = {}

    if cfg.kind == ROTATING_MAB:
        # State s = number of wins reflected in symbols read so far, mod n.
        # The incoming observation reports the previous step's win, so the
        # effective offset for the pending action is s + won(obs).
        n = len(cfg.win_probs)
        for s in range(n):
            for sym in _mab_symbols(n):
                nxt = (s + sym.obs.bits[0]) % n
                p = cfg.win_probs[(sym.action + nxt) % n]
                transitions[(s, sym)] = nxt
                outputs[(s, sym)] = builder.intern(_bernoulli_win_dist(p))
        machine = MealyMachine(n, 0, 1, n, transitions, outputs)

    elif cfg.kind == MALFUNCTION_MAB:
        # States 0..k-1 count arm-0 pulls; state k is the one-turn malfunction.
        k = cfg.malfunction_k
        num = k + 1
        for s in range(num):
            for sym in _mab_symbols(cfg.num_actions):
                if s == k:
                    nxt = 0
                    p = 0.0 if sym.action == 0 else cfg.win_probs[sym.action]
                elif sym.action == 0:
                    nxt = s + 1
                    p = cfg.win_probs[0]
                else:
                    nxt = s
                    p = cfg.win_probs[sym.action]
                transitions[(s, sym)] = nxt
                outputs[(s, sym)] = builder.intern(_bernoulli_win_dist(p))
        machine = MealyMachine(num, 0, 1, cfg.num_actions, transitions, outputs)

    elif cfg.kind == CHEAT_MAB:
        # KMP progress states plus an absorbing unlocked state.
        seq = cfg.cheat_sequence
        delta = kmp_transitions(seq, cfg.num_actions)
        length = len(seq)
        unlocked = length
        for s in range(length + 1):
            for sym in _mab_symbols(cfg.num_actions):
                if s == unlocked:
                    nxt, p = unlocked, 1.0
                else:
                    step_to = delta[s][sym.action]
                    nxt = unlocked if step_to == length else step_to
                    p = cfg.win_probs[sym.action]
                transitions[(s, sym)] = nxt
                outputs[(s, sym)] = builder.intern(_bernoulli_win_dist(p))
        machine = MealyMachine(length + 1, 0, 1, cfg.num_actions, transitions, outputs)

    elif cfg.kind == MAZE:
        num = 4 * cfg.rotate_every if cfg.rotate_every > 0 else 1
        bits = _coord_bits(cfg.grid_size)
        positions = [(x, y) for x in range(cfg.grid_size) for y in range(cfg.grid_size)]
        for s in range(num):
            orient = (s // cfg.rotate_every) % 4 if cfg.rotate_every > 0 else 0
            for x, y in positions:
                obs = maze_obs(x, y, bits)
                for a in range(4):
                    sym = InputSymbol(obs, a)
                    transitions[(s, sym)] = (s + 1) % num
                    outputs[(s, sym)] = builder.intern(
                        _maze_outcome_dist(cfg, x, y, a, orient, bits))
        machine = MealyMachine(num, 0, 2 * bits, 4, transitions, outputs)

    else:  # pragma: no cover - kinds validated by EnvConfig
        raise ConfigError(cfg.kind)
    return machine, builder.table


def _maze_outcome_dist(cfg: EnvConfig, x: int, y: int, action: int, orient: int,
                       bits: int) -> OutcomeDistribution:
    resolved = action
    for _ in range(orient):
        resolved = _CLOCKWISE[resolved]
    source = maze_obs(x, y, bits)

    def land(direction):
        dx, dy = _MOVE[direction]
        nx, ny = x + dx, y + dy
        if not (0 <= nx < cfg.grid_size and 0 <= ny < cfg.grid_size):
            nx, ny = x, y
        return nx, ny

    moves = [(land(resolved), 1.0 - cfg.slip_prob), (land(_OPPOSITE[resolved]), cfg.slip_prob)]
    mask = 0
    for (nx, ny), _p in moves:
        mask |= diff_mask(source, maze_obs(nx, ny, bits))
    probs: dict[Outcome, float] = {}
    for (nx, ny), p in moves:
        if p <= 0.0:
            continue
        reward = 1.0 if (nx, ny) == cfg.goal else 0.0
        outcome = (project_obs(maze_obs(nx, ny, bits), mask), reward)
        probs[outcome] = probs.get(outcome, 0.0) + p
    return OutcomeDistribution.from_probs(mask, probs)


# ---------------------------------------------------------------------------
# Trace CSV
# ---------------------------------------------------------------------------

TRACE_CSV_HEADER = ["episode", "t", "action", "reward", "obs_bits"]


def export_traces_csv(traces: Sequence[Trace]) -> str:
    """One row per step; the initial observation is row t=0 with action -1."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(TRACE_CSV_HEADER)
    for ep, trace in enumerate(traces):
        writer.writerow([ep, 0, -1, repr(0.0), trace.initial_obs.as_str()])
        for t, step in enumerate(trace.steps, start=1):
            writer.writerow([ep, t, step.action, repr(step.reward), step.next_obs.as_str()])
    return buf.getvalue()


def import_traces_csv(text: str) -> list[Trace]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != TRACE_CSV_HEADER:
        raise ConfigError(f"bad trace CSV header: {header}")
    episodes: dict[int, dict] = {}
    for row in reader:
        if not row:
            continue
        ep, t, action, reward, obs = int(row[0]), int(row[1]), int(row[2]), float(row[3]), row[4]
        entry = episodes.setdefault(ep, {"initial": None, "steps": []})
        if t == 0:
            entry["initial"] = Observation.from_str(obs)
        else:
            entry["steps"].append((t, Step(action, reward, Observation.from_str(obs))))
    traces = []
    for ep in sorted(episodes):
        entry = episodes[ep]
        if entry["initial"] is None:
            raise ConfigError(f"episode {ep} missing its t=0 row")
        steps = tuple(s for _, s in sorted(entry["steps"], key=lambda ts: ts[0]))
        traces.append(Trace(entry["initial"], steps))
    return traces
