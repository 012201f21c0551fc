"""Independent BD-rate calculator used as a test oracle.

Hand-written monotone cubic Hermite interpolation of log10(rate) against
quality, integrated per piece with Simpson's rule (exact for cubics).
Shares no code with the package.
"""

import math

import numpy as np


def _sign(x):
    return int(x > 0) - int(x < 0)


def _slopes(x, y):
    n = len(x)
    h = [x[i + 1] - x[i] for i in range(n - 1)]
    delta = [(y[i + 1] - y[i]) / h[i] for i in range(n - 1)]
    d = [0.0] * n
    for k in range(1, n - 1):
        if _sign(delta[k - 1]) * _sign(delta[k]) <= 0:
            d[k] = 0.0
        else:
            w1 = 2 * h[k] + h[k - 1]
            w2 = h[k] + 2 * h[k - 1]
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k])

    def edge(h0, h1, m0, m1):
        e = ((2 * h0 + h1) * m0 - h0 * m1) / (h0 + h1)
        if _sign(e) != _sign(m0):
            return 0.0
        if _sign(m0) != _sign(m1) and abs(e) > abs(3 * m0):
            return 3 * m0
        return e

    d[0] = edge(h[0], h[1], delta[0], delta[1])
    d[-1] = edge(h[-1], h[-2], delta[-1], delta[-2])
    return d


def _hermite(x0, x1, y0, y1, d0, d1, t):
    h = x1 - x0
    s = (t - x0) / h
    return (
        (2 * s**3 - 3 * s**2 + 1) * y0
        + (s**3 - 2 * s**2 + s) * h * d0
        + (-2 * s**3 + 3 * s**2) * y1
        + (s**3 - s**2) * h * d1
    )


def _integral(x, y, lo, hi):
    d = _slopes(x, y)
    total = 0.0
    for i in range(len(x) - 1):
        a, b = max(lo, x[i]), min(hi, x[i + 1])
        if b <= a:
            continue
        f = lambda t: _hermite(x[i], x[i + 1], y[i], y[i + 1], d[i], d[i + 1], t)  # noqa: E731
        total += (b - a) / 6 * (f(a) + 4 * f((a + b) / 2) + f(b))
    return total


def reference_bd_rate(r1, q1, r2, q2):
    l1 = [math.log10(r) for r in r1]
    l2 = [math.log10(r) for r in r2]
    lo, hi = max(min(q1), min(q2)), min(max(q1), max(q2))
    avg = (_integral(q2, l2, lo, hi) - _integral(q1, l1, lo, hi)) / (hi - lo)
    return (10**avg - 1) * 100


def random_curve(rng, lo_q=28.0):
    bpp = np.sort(rng.uniform(0.02, 1.0, 4))
    while np.any(np.diff(bpp) < 1e-3):
        bpp = np.sort(rng.uniform(0.02, 1.0, 4))
    q = lo_q + np.cumsum(rng.uniform(0.3, 3.0, 4))
    return bpp, q


def overlapping_pairs(rng, count, min_overlap=0.5):
    """Yield ``count`` random curve pairs whose quality ranges overlap by ``min_overlap`` dB or more."""
    made = 0
    while made < count:
        b1, q1 = random_curve(rng)
        b2, q2 = random_curve(rng, lo_q=28.0 + rng.uniform(-1.5, 1.5))
        if min(q1[-1], q2[-1]) - max(q1[0], q2[0]) < min_overlap:
            continue
        made += 1
        yield b1, q1, b2, q2
