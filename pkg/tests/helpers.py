"""Shared test utilities."""
import numpy as np

from exprmap.stream import protocol as P

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def random_message(rng):
    kind = rng.integers(0, 7)
    n = int(rng.integers(0, 6))
    f = lambda *s: rng.normal(size=s).astype(np.float32)  # noqa: E731
    if kind == 0:
        return P.Hello(int(rng.integers(0, 2 ** 32)))
    if kind == 1:
        deg = int(rng.integers(0, 3))
        return P.InitStatic(deg, f(n, 3), f(n, 4), f(n, 3), f(n), f(n, 3 * (deg + 1) ** 2))
    if kind == 2:
        return P.BsFrame(int(rng.integers(0, 2 ** 63)), int(rng.integers(0, 2 ** 63)), rng.uniform(size=51))
    if kind == 3:
        return P.GaussUpdate(int(rng.integers(0, 2 ** 63)), f(n, 3), f(n, 4), f(n, 3))
    if kind == 4:
        return P.StatsReq()
    if kind == 5:
        return P.Stats({"frames": int(rng.integers(0, 100)), "stage_us": {"bda": float(rng.uniform())}})
    return P.Error("format", "détail " + str(rng.integers(0, 10)))
