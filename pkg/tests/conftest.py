import random

import numpy as np
import pytest

from rdplearn.core import InputSymbol, MealyMachine, Observation
from rdplearn.planning import ProductMDP


def all_symbols(obs_width, num_actions):
    symbols = []
    for value in range(2 ** obs_width):
        bits = tuple((value >> (obs_width - 1 - i)) & 1 for i in range(obs_width))
        for a in range(num_actions):
            symbols.append(InputSymbol(Observation(bits), a))
    return symbols


def random_machine(rng: random.Random, max_states: int = 20, obs_width: int = 2,
                   num_actions: int = 2, num_labels: int = 4,
                   extra_density: float = 0.5) -> MealyMachine:
    """Random valid machine: a spanning tree guarantees reachability."""
    n = rng.randint(1, max_states)
    symbols = all_symbols(obs_width, num_actions)
    transitions, outputs = {}, {}
    for state in range(1, n):
        while True:
            src = rng.randrange(state)
            sym = symbols[rng.randrange(len(symbols))]
            if (src, sym) not in transitions:
                break
        transitions[(src, sym)] = state
        outputs[(src, sym)] = rng.randrange(num_labels)
    for state in range(n):
        for sym in symbols:
            if (state, sym) in transitions or rng.random() > extra_density:
                continue
            transitions[(state, sym)] = rng.randrange(n)
            outputs[(state, sym)] = rng.randrange(num_labels)
    return MealyMachine(n, 0, obs_width, num_actions, transitions, outputs)


def random_mdp_arrays(rng: random.Random, num_states: int, num_actions: int,
                      max_branch: int = 3, terminal_prob: float = 0.0):
    """Random explicit MDP in the flat-array layout used by the planners."""
    row_start = [0]
    succ, prob, reward = [], [], []
    terminal = [1 if rng.random() < terminal_prob else 0 for _ in range(num_states)]
    for s in range(num_states):
        for a in range(num_actions):
            if terminal[s]:
                succ.append(s)
                prob.append(1.0)
                reward.append(0.0)
            else:
                branch = rng.randint(1, max_branch)
                weights = [rng.random() + 1e-3 for _ in range(branch)]
                total = sum(weights)
                for k in range(branch):
                    succ.append(rng.randrange(num_states))
                    prob.append(weights[k] / total)
                    reward.append(rng.choice([0.0, 0.5, 1.0]))
            row_start.append(len(succ))
    return (np.array(row_start, dtype=np.int64), np.array(succ, dtype=np.int64),
            np.array(prob, dtype=np.float64), np.array(reward, dtype=np.float64),
            np.array(terminal, dtype=np.uint8))


def mdp_from_arrays(arrays, num_actions: int) -> ProductMDP:
    row_start, succ, prob, reward, terminal = arrays
    num_states = len(terminal)
    states = [(Observation((0,)), s) for s in range(num_states)]
    expected = np.zeros(num_states * num_actions)
    for row in range(num_states * num_actions):
        lo, hi = row_start[row], row_start[row + 1]
        expected[row] = float(np.sum(prob[lo:hi] * reward[lo:hi]))
    return ProductMDP(states, num_actions, row_start, succ, prob, reward,
                      expected, terminal)


@pytest.fixture
def rng():
    return random.Random(0xC0FFEE)
