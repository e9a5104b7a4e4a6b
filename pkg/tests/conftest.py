"""Independent reference implementations shared by the test modules."""
import itertools

import numpy as np
import pytest

from uclidnet import _kernels


def brute_nn(queries, points):
    """Nearest index (lowest on ties) and squared distance by full scan."""
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    d = q[:, None, :] - p[None, :, :]
    # same association order as the kernels: dx*dx + dy*dy + dz*dz
    d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
    idx = np.argmin(d2, axis=1)
    return idx, d2[np.arange(len(q)), idx]


def brute_assignment_cost(cost):
    """Minimum assignment cost by enumerating every permutation (n <= 8)."""
    n = cost.shape[0]
    rows = np.arange(n)
    return min(cost[rows, list(p)].sum() for p in itertools.permutations(range(n)))


def direct_conv(x, w, b, stride, padding):
    """Cross-correlation by explicit nested loops over output positions (2D or 3D)."""
    d = x.ndim - 1
    xp = np.pad(x, [(0, 0)] + [(padding, padding)] * d)
    k = w.shape[-1]
    out_sp = [(n + 2 * padding - k) // stride + 1 for n in x.shape[1:]]
    y = np.zeros((w.shape[0],) + tuple(out_sp))
    for o in range(w.shape[0]):
        for pos in itertools.product(*[range(n) for n in out_sp]):
            sl = tuple(slice(p * stride, p * stride + k) for p in pos)
            y[(o,) + pos] = np.sum(xp[(slice(None),) + sl] * w[o])
        if b is not None:
            y[o] += b[o]
    return y


BACKENDS = ["pure"] + (["compiled"] if _kernels.compiled is not None else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
