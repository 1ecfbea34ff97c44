import random

import pytest

from conftest import random_mdp_arrays
from rdplearn._kernels import backend_name, cy_uct_search, py_uct_search
from rdplearn._kernels._uct_py import splitmix64_stream as py_stream

cython_built = cy_uct_search is not None
needs_cython = pytest.mark.skipif(not cython_built, reason="extension not built")


def test_backend_name():
    assert backend_name() in ("python", "cython")


@needs_cython
def test_splitmix_streams_identical():
    from rdplearn._kernels._uct_cy import splitmix64_stream as cy_stream

    for seed in (0, 1, 12345, 2**63 + 17, 2**64 - 1):
        assert py_stream(seed, 50) == cy_stream(seed, 50)


@needs_cython
def test_uct_results_bit_identical(rng):
    # identical algorithm + identical RNG stream: results must match exactly,
    # including the accumulated floating-point values
    for trial in range(30):
        num_states = rng.randint(2, 12)
        num_actions = rng.randint(2, 4)
        arrays = random_mdp_arrays(rng, num_states, num_actions, terminal_prob=0.2)
        row_start, succ, prob, reward, terminal = arrays
        args = (row_start, succ, prob, reward, terminal, num_actions,
                rng.randrange(num_states), rng.choice([1, 10, 200]),
                rng.choice([0.0, 1.0, 1.4]), rng.randint(1, 12), 0.95,
                rng.getrandbits(64))
        action_py, counts_py, values_py = py_uct_search(*args)
        action_cy, counts_cy, values_cy = cy_uct_search(*args)
        assert action_py == action_cy
        assert counts_py == counts_cy
        assert values_py == values_cy  # exact float equality


def test_python_kernel_survives_numpy_inputs(rng):
    arrays = random_mdp_arrays(rng, 4, 2)
    row_start, succ, prob, reward, terminal = arrays
    action, counts, values = py_uct_search(row_start, succ, prob, reward, terminal,
                                           2, 0, 20, 1.4, 5, 0.95, 7)
    assert action in (0, 1)
    assert sum(counts) == 20
