"""Core domain types: observations, traces, Mealy machines, discounted returns.

Everything here is an immutable value after construction; operations are pure
functions so objects can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence


class RdplearnError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(RdplearnError):
    """An enumerated configuration invariant was violated."""


class InvalidMachineError(RdplearnError):
    """A Mealy machine failed a structural invariant at construction."""


class UndefinedTransitionError(RdplearnError):
    """The machine has no transition for a (state, symbol) pair.

    Learned machines are partial: training data never covers every symbol.
    Callers that need totality apply the fallback policy in the planning
    module (hold the state, emit a matching or identity label).
    """

    def __init__(self, state: int, symbol: "InputSymbol", position: int | None = None):
        self.state = state
        self.symbol = symbol
        self.position = position
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"undefined transition from state {state} on {symbol}{where}")


class MealyFormatError(RdplearnError):
    """Malformed Mealy text input; carries the offending line number."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True)
class PropositionSet:
    """The Boolean propositions whose assignments form the observation space."""

    count: int
    names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("proposition count must be >= 1")
        names = self.names or tuple(f"p{i}" for i in range(self.count))
        object.__setattr__(self, "names", names)
        if len(names) != self.count or len(set(names)) != self.count:
            raise ConfigError("names must be exactly `count` distinct labels")


@dataclass(frozen=True, order=True)
class Observation:
    """A fixed-width bit vector; one bit per proposition.

    Ordering is lexicographic on the bits so observations can key maps and
    break ties deterministically.
    """

    bits: tuple[int, ...]

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ConfigError(f"observation bits must be 0/1, got {self.bits}")

    @property
    def width(self) -> int:
        return len(self.bits)

    def as_str(self) -> str:
        return "".join(str(b) for b in self.bits)

    @classmethod
    def from_str(cls, text: str) -> "Observation":
        if not text or any(ch not in "01" for ch in text):
            raise ConfigError(f"not a binary observation string: {text!r}")
        return cls(tuple(int(ch) for ch in text))

    def replace_bits(self, positions: Sequence[int], values: Sequence[int]) -> "Observation":
        """Return a copy with `positions` set to `values`; other bits kept."""
        bits = list(self.bits)
        for pos, val in zip(positions, values):
            bits[pos] = val
        return Observation(tuple(bits))


Action = int


class InputSymbol(NamedTuple):
    """One Mealy input: the current observation paired with the chosen action."""

    obs: Observation
    action: Action


@dataclass(frozen=True)
class Step:
    action: Action
    reward: float
    next_obs: Observation


@dataclass(frozen=True)
class Trace:
    """An alternating sequence obs, action, reward, obs, ... from one episode."""

    initial_obs: Observation
    steps: tuple[Step, ...]

    def __post_init__(self):
        width = self.initial_obs.width
        if any(s.next_obs.width != width for s in self.steps):
            raise ConfigError("all observations in a trace must share one width")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def rewards(self) -> tuple[float, ...]:
        return tuple(s.reward for s in self.steps)

    @property
    def total_reward(self) -> float:
        return sum(s.reward for s in self.steps)

    def observations(self) -> tuple[Observation, ...]:
        return (self.initial_obs,) + tuple(s.next_obs for s in self.steps)

    def input_symbols(self) -> tuple[InputSymbol, ...]:
        """Symbol i pairs the observation before step i with step i's action."""
        prev = self.initial_obs
        out = []
        for s in self.steps:
            out.append(InputSymbol(prev, s.action))
            prev = s.next_obs
        return tuple(out)


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    """Sum of gamma**i * rewards[i]; the empty sequence returns 0."""
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma must be in (0, 1), got {gamma}")
    total = 0.0
    discount = 1.0
    for r in rewards:
        total += discount * r
        discount *= gamma
    return total


@dataclass
class MealyMachine:
    """A deterministic finite-state transducer over (observation, action) inputs.

    `transitions` and `outputs` are partial maps defined on exactly the same
    (state, symbol) pairs; outputs are opaque label ids assigned by the
    clustering stage. Machines are validated on construction: targets in
    range, aligned key sets, and every state reachable from the initial one.
    """

    num_states: int
    initial_state: int
    obs_width: int
    num_actions: int
    transitions: dict[tuple[int, InputSymbol], int] = field(default_factory=dict)
    outputs: dict[tuple[int, InputSymbol], int] = field(default_factory=dict)

    def __post_init__(self):
        if self.num_states < 1:
            raise InvalidMachineError("a machine needs at least one state")
        if not 0 <= self.initial_state < self.num_states:
            raise InvalidMachineError("initial state out of range")
        if self.transitions.keys() != self.outputs.keys():
            raise InvalidMachineError("transitions and outputs must share key sets")
        for (state, sym), target in self.transitions.items():
            if not 0 <= state < self.num_states or not 0 <= target < self.num_states:
                raise InvalidMachineError(f"state out of range in ({state}, {sym}) -> {target}")
            if sym.obs.width != self.obs_width:
                raise InvalidMachineError(f"symbol obs width {sym.obs.width} != {self.obs_width}")
            if not 0 <= sym.action < self.num_actions:
                raise InvalidMachineError(f"action {sym.action} out of range")
        for (_, _), label in self.outputs.items():
            if label < 0:
                raise InvalidMachineError("labels must be non-negative")
        self._check_reachable()

    def _check_reachable(self):
        seen = {self.initial_state}
        frontier = [self.initial_state]
        targets_by_state: dict[int, list[int]] = {}
        for (state, _), target in self.transitions.items():
            targets_by_state.setdefault(state, []).append(target)
        while frontier:
            s = frontier.pop()
            for t in targets_by_state.get(s, ()):
                if t not in seen:
                    seen.add(t)
                    frontier.append(t)
        if len(seen) != self.num_states:
            missing = sorted(set(range(self.num_states)) - seen)
            raise InvalidMachineError(f"unreachable states: {missing}")

    def step(self, state: int, sym: InputSymbol) -> tuple[int, int]:
        """Return (next state, output label) or raise UndefinedTransitionError."""
        if not 0 <= state < self.num_states:
            raise InvalidMachineError(f"state {state} out of range")
        key = (state, sym)
        if key not in self.transitions:
            raise UndefinedTransitionError(state, sym)
        return self.transitions[key], self.outputs[key]

    def run(self, syms: Iterable[InputSymbol]) -> list[int]:
        """Fold `step` from the initial state; returns the label at every step."""
        state = self.initial_state
        labels = []
        for i, sym in enumerate(syms):
            try:
                state, label = self.step(state, sym)
            except UndefinedTransitionError as err:
                raise UndefinedTransitionError(err.state, err.symbol, position=i) from None
            labels.append(label)
        return labels

    def defined_symbols(self, state: int) -> list[InputSymbol]:
        return sorted(sym for (s, sym) in self.transitions if s == state)


def serialize_mealy(m: MealyMachine) -> str:
    """Line-oriented text form; see `deserialize_mealy` for the grammar."""
    lines = [f"mealy {m.num_states} {m.initial_state} {m.obs_width} {m.num_actions}"]
    for (state, sym), target in sorted(m.transitions.items()):
        label = m.outputs[(state, sym)]
        lines.append(f"{state} {sym.obs.as_str()} {sym.action} -> {target} {label}")
    return "\n".join(lines) + "\n"


def deserialize_mealy(text: str) -> MealyMachine:
    """Parse the text format written by `serialize_mealy`.

    Header: ``mealy <num_states> <initial> <obs_width> <num_actions>``,
    then one line per defined pair:
    ``<state> <obs-as-binary> <action> -> <next_state> <label>``.
    Raises MealyFormatError with the offending line number.
    """
    lines = text.splitlines()
    header_no = None
    header = None
    body: list[tuple[int, str]] = []
    for no, raw in enumerate(lines, start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if header is None:
            header_no, header = no, stripped
        else:
            body.append((no, stripped))
    if header is None:
        raise MealyFormatError(1, "missing header")
    parts = header.split()
    if len(parts) != 5 or parts[0] != "mealy":
        raise MealyFormatError(header_no, f"bad header: {header!r}")
    try:
        num_states, initial, obs_width, num_actions = (int(p) for p in parts[1:])
    except ValueError:
        raise MealyFormatError(header_no, f"non-integer header field in {header!r}") from None

    transitions: dict[tuple[int, InputSymbol], int] = {}
    outputs: dict[tuple[int, InputSymbol], int] = {}
    for no, line in body:
        fields = line.split()
        if len(fields) != 6 or fields[3] != "->":
            raise MealyFormatError(no, f"expected '<state> <obs> <action> -> <next> <label>', got {line!r}")
        try:
            state = int(fields[0])
            obs = Observation.from_str(fields[1])
            action = int(fields[2])
            target = int(fields[4])
            label = int(fields[5])
        except (ValueError, ConfigError) as err:
            raise MealyFormatError(no, str(err)) from None
        key = (state, InputSymbol(obs, action))
        if key in transitions:
            raise MealyFormatError(no, f"duplicate pair {key}")
        transitions[key] = target
        outputs[key] = label
    try:
        return MealyMachine(num_states, initial, obs_width, num_actions, transitions, outputs)
    except InvalidMachineError as err:
        raise MealyFormatError(header_no, str(err)) from None


def export_dot(m: MealyMachine) -> str:
    """GraphViz text with one edge per defined pair, labeled 'obs/action -> label'."""
    lines = ["digraph mealy {", "  rankdir=LR;", f'  __start [shape=point]; __start -> s{m.initial_state};']
    for s in range(m.num_states):
        lines.append(f'  s{s} [shape=circle, label="{s}"];')
    for (state, sym), target in sorted(m.transitions.items()):
        label = m.outputs[(state, sym)]
        lines.append(f'  s{state} -> s{target} [label="{sym.obs.as_str()}/{sym.action} -> {label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
