"""Independent reference implementations used by several test modules."""

import itertools

import numpy as np


def brute_route(logits, k):
    """Per-token full sort by (-value, index); confidence and winner by scanning."""
    b, t, e = logits.shape
    idx = np.zeros((b, t, k), dtype=int)
    for bi, ti in itertools.product(range(b), range(t)):
        row = logits[bi, ti].tolist()
        idx[bi, ti] = sorted(range(e), key=lambda j: (-row[j], j))[:k]
    conf = np.take_along_axis(logits, idx[..., :1], -1)[..., 0]
    winner = np.array([min(range(t), key=lambda j: (-conf[bi, j], j)) for bi in range(b)])
    return idx, conf, winner


def direct_gates(logits, idx, e):
    g = np.zeros(logits.shape[:2] + (e,))
    for bi, ti in itertools.product(range(logits.shape[0]), range(logits.shape[1])):
        s = logits[bi, ti, idx[bi, ti]]
        w = np.exp(s - s.max())
        w /= w.sum()
        g[bi, ti, idx[bi, ti]] = w
    return g


def random_case(rng):
    b, t, e = (int(rng.integers(1, n + 1)) for n in (4, 8, 8))
    k = int(rng.integers(1, e + 1))
    # half the cases on a coarse grid so ties are exercised
    if rng.random() < 0.5:
        logits = rng.integers(-2, 3, (b, t, e)).astype(float)
    else:
        logits = rng.standard_normal((b, t, e))
    return logits, k
