import numpy as np
import pytest

from routerefine import instances as inst_mod


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(key=12345))


def enumerate_tsptw_feasibility(instance):
    """Independent oracle: vectorized arrival recursion over every permutation
    fixing node 0 first.  Returns (any_feasible, feasible_mask_per_perm)."""
    import itertools

    n = instance.n
    d = instance.dist_matrix()
    scale = instance.time_scale
    lo, hi = instance.tw[:, 0], instance.tw[:, 1]
    perms = np.array(list(itertools.permutations(range(1, n))), dtype=np.int64)
    perms = np.concatenate([np.zeros((len(perms), 1), dtype=np.int64), perms], axis=1)
    t = np.zeros(len(perms))
    ok = np.ones(len(perms), dtype=bool)
    for k in range(1, n):
        arr = t + d[perms[:, k - 1], perms[:, k]] / scale
        ok &= arr <= hi[perms[:, k]]
        t = np.maximum(arr, lo[perms[:, k]])
    ret = t + d[perms[:, -1], 0] / scale
    ok &= ret <= hi[0]
    return bool(ok.any()), ok, perms
