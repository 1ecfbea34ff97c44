"""UCT search kernel with a compiled fast path.

The Cython extension and the pure-Python module implement the identical
algorithm with the identical splitmix64 RNG, so they return bit-identical
results; the extension is simply faster. Selection happens at import time,
overridable with RDPLEARN_KERNEL=py|cy for benchmarking.
"""

import os

from ._uct_py import uct_search as _py_uct_search

try:
    from ._uct_cy import uct_search as _cy_uct_search
except ImportError:  # extension not built; fall back to pure Python
    _cy_uct_search = None

_choice = os.environ.get("RDPLEARN_KERNEL", "").lower()
if _choice == "py":
    uct_search = _py_uct_search
elif _choice == "cy":
    if _cy_uct_search is None:
        raise ImportError("RDPLEARN_KERNEL=cy but the extension is not built")
    uct_search = _cy_uct_search
else:
    uct_search = _cy_uct_search or _py_uct_search

py_uct_search = _py_uct_search
cy_uct_search = _cy_uct_search


def backend_name() -> str:
    return "cython" if uct_search is _cy_uct_search else "python"
