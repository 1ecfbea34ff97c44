"""Pure-Python UCT kernel; the reference twin of the Cython extension.

Operates on the flattened product-model arrays (see planning.ProductMDP).
Every arithmetic step mirrors the extension exactly (same splitmix64 stream,
same operation order) so both backends return bit-identical results.
"""

from __future__ import annotations

import math

_M64 = (1 << 64) - 1
_INV53 = 1.0 / 9007199254740992.0  # 2**-53


def _mix(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _M64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    z ^= z >> 31
    return state, z


def splitmix64_stream(seed: int, count: int) -> list[int]:
    """Raw 64-bit outputs, exposed for backend-equivalence tests."""
    state = seed & _M64
    out = []
    for _ in range(count):
        state, z = _mix(state)
        out.append(z)
    return out


def uct_search(row_start, succ, prob, reward, terminal, num_actions: int,
               root: int, iterations: int, c: float, max_depth: int,
               gamma: float, seed: int):
    """UCB1 tree search over the flattened model; returns (action, counts, values).

    One new tree node is expanded per rollout; unvisited actions at a node are
    taken before any UCB comparison; returns are backed up with discounting.
    The recommended action maximizes the mean backed-up value at the root,
    ties broken toward the lexicographically smallest action.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    row_start = [int(x) for x in row_start]
    succ = [int(x) for x in succ]
    prob = [float(x) for x in prob]
    reward = [float(x) for x in reward]
    terminal = [int(x) for x in terminal]
    num_states = len(terminal)
    A = num_actions

    rng_state = seed & _M64

    def uniform():
        nonlocal rng_state
        rng_state, z = _mix(rng_state)
        return (z >> 11) * _INV53

    def sample_outcome(state: int, action: int) -> int:
        k = row_start[state * A + action]
        end = row_start[state * A + action + 1]
        u = uniform()
        acc = 0.0
        while k < end - 1:
            acc += prob[k]
            if u < acc:
                break
            k += 1
        return k

    max_nodes = iterations + 1
    node_state = [0] * max_nodes
    node_total = [0] * max_nodes
    n_sa = [0] * (max_nodes * A)
    q_sa = [0.0] * (max_nodes * A)
    children: dict[int, int] = {}
    node_state[0] = root
    num_nodes = 1

    path_node = [0] * (max_depth + 1)
    path_action = [0] * (max_depth + 1)
    path_reward = [0.0] * (max_depth + 1)

    for _ in range(iterations):
        node = 0
        state = root
        depth = max_depth
        plen = 0
        tail = 0.0
        while depth > 0 and not terminal[state]:
            base = node * A
            action = -1
            for a in range(A):
                if n_sa[base + a] == 0:
                    action = a
                    break
            if action < 0:
                logn = math.log(node_total[node])
                action = 0
                best = q_sa[base] / n_sa[base] + c * math.sqrt(logn / n_sa[base])
                for a in range(1, A):
                    v = q_sa[base + a] / n_sa[base + a] + c * math.sqrt(logn / n_sa[base + a])
                    if v > best:
                        best = v
                        action = a
            k = sample_outcome(state, action)
            r = reward[k]
            s2 = succ[k]
            path_node[plen] = node
            path_action[plen] = action
            path_reward[plen] = r
            plen += 1
            depth -= 1
            key = (node * A + action) * num_states + s2
            child = children.get(key, -1)
            if child >= 0:
                node = child
                state = s2
                continue
            # expand one node, then finish with a random rollout
            child = num_nodes
            num_nodes += 1
            node_state[child] = s2
            children[key] = child
            disc = 1.0
            rstate = s2
            while depth > 0 and not terminal[rstate]:
                ra = int(uniform() * A)
                rk = sample_outcome(rstate, ra)
                tail += disc * reward[rk]
                disc *= gamma
                rstate = succ[rk]
                depth -= 1
            break
        ret = tail
        for i in range(plen - 1, -1, -1):
            ret = path_reward[i] + gamma * ret
            idx = path_node[i] * A + path_action[i]
            n_sa[idx] += 1
            q_sa[idx] += ret
            node_total[path_node[i]] += 1

    best_action = 0
    best_value = -math.inf
    counts = [0] * A
    values = [0.0] * A
    for a in range(A):
        counts[a] = n_sa[a]
        if n_sa[a] > 0:
            values[a] = q_sa[a] / n_sa[a]
            if values[a] > best_value:
                best_value = values[a]
                best_action = a
    return best_action, counts, values
