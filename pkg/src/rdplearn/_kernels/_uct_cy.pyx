# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
# distutils: language = c++
"""Compiled UCT kernel; algorithmic twin of _uct_py (bit-identical outputs)."""

from libc.math cimport log, sqrt
from libcpp.unordered_map cimport unordered_map

import numpy as np

ctypedef unsigned long long u64

cdef double INV53 = 1.0 / 9007199254740992.0


cdef inline u64 _mix(u64* state) noexcept nogil:
    cdef u64 z
    state[0] = state[0] + (<u64>0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> 30)) * (<u64>0xBF58476D1CE4E5B9)
    z = (z ^ (z >> 27)) * (<u64>0x94D049BB133111EB)
    z = z ^ (z >> 31)
    return z


def splitmix64_stream(seed, int count):
    """Raw 64-bit outputs, exposed for backend-equivalence tests."""
    cdef u64 state = <u64>(seed & 0xFFFFFFFFFFFFFFFF)
    out = []
    cdef int i
    for i in range(count):
        out.append(_mix(&state))
    return out


def uct_search(long long[::1] row_start, long long[::1] succ, double[::1] prob,
               double[::1] reward, unsigned char[::1] terminal, int num_actions,
               int root, int iterations, double c, int max_depth, double gamma,
               seed):
    """See _uct_py.uct_search; identical contract and identical results."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    cdef int A = num_actions
    cdef long long num_states = terminal.shape[0]
    cdef u64 rng_state = <u64>(seed & 0xFFFFFFFFFFFFFFFF)

    cdef int max_nodes = iterations + 1
    node_state_arr = np.zeros(max_nodes, dtype=np.int64)
    node_total_arr = np.zeros(max_nodes, dtype=np.int64)
    n_sa_arr = np.zeros(max_nodes * A, dtype=np.int64)
    q_sa_arr = np.zeros(max_nodes * A, dtype=np.float64)
    path_node_arr = np.zeros(max_depth + 1, dtype=np.int64)
    path_action_arr = np.zeros(max_depth + 1, dtype=np.int64)
    path_reward_arr = np.zeros(max_depth + 1, dtype=np.float64)
    cdef long long[::1] node_state = node_state_arr
    cdef long long[::1] node_total = node_total_arr
    cdef long long[::1] n_sa = n_sa_arr
    cdef double[::1] q_sa = q_sa_arr
    cdef long long[::1] path_node = path_node_arr
    cdef long long[::1] path_action = path_action_arr
    cdef double[::1] path_reward = path_reward_arr

    cdef unordered_map[long long, int] children
    node_state[0] = root
    cdef int num_nodes = 1

    cdef int it, node, depth, plen, action, a, child, i, ra
    cdef long long state, s2, k, end, key, base, idx, rstate, rk
    cdef double u, acc, logn, best, v, tail, ret, disc, r
    cdef u64 z

    for it in range(iterations):
        node = 0
        state = root
        depth = max_depth
        plen = 0
        tail = 0.0
        while depth > 0 and terminal[state] == 0:
            base = node * A
            action = -1
            for a in range(A):
                if n_sa[base + a] == 0:
                    action = a
                    break
            if action < 0:
                logn = log(<double>node_total[node])
                action = 0
                best = q_sa[base] / n_sa[base] + c * sqrt(logn / n_sa[base])
                for a in range(1, A):
                    v = q_sa[base + a] / n_sa[base + a] + c * sqrt(logn / n_sa[base + a])
                    if v > best:
                        best = v
                        action = a
            # sample one outcome from the (state, action) row
            k = row_start[state * A + action]
            end = row_start[state * A + action + 1]
            z = _mix(&rng_state)
            u = (z >> 11) * INV53
            acc = 0.0
            while k < end - 1:
                acc += prob[k]
                if u < acc:
                    break
                k += 1
            r = reward[k]
            s2 = succ[k]
            path_node[plen] = node
            path_action[plen] = action
            path_reward[plen] = r
            plen += 1
            depth -= 1
            key = (node * A + action) * num_states + s2
            if children.count(key):
                node = children[key]
                state = s2
                continue
            # expand one node, then finish with a random rollout
            child = num_nodes
            num_nodes += 1
            node_state[child] = s2
            children[key] = child
            disc = 1.0
            rstate = s2
            while depth > 0 and terminal[rstate] == 0:
                z = _mix(&rng_state)
                u = (z >> 11) * INV53
                ra = <int>(u * A)
                rk = row_start[rstate * A + ra]
                end = row_start[rstate * A + ra + 1]
                z = _mix(&rng_state)
                u = (z >> 11) * INV53
                acc = 0.0
                while rk < end - 1:
                    acc += prob[rk]
                    if u < acc:
                        break
                    rk += 1
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

    cdef int best_action = 0
    cdef double best_value = -1e300
    cdef bint any_visit = 0
    counts = []
    values = []
    for a in range(A):
        counts.append(int(n_sa[a]))
        if n_sa[a] > 0:
            v = q_sa[a] / n_sa[a]
            values.append(v)
            if (not any_visit) or v > best_value:
                best_value = v
                best_action = a
                any_visit = 1
        else:
            values.append(0.0)
    return best_action, counts, values
