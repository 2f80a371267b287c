"""Small one-dimensional search helpers shared by the model modules."""

import math

import numpy as np

GRID_POINTS = 4096
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_max(fn, lo, hi, tol=1e-12, max_iter=200):
    """Golden-section search for the maximum of a unimodal ``fn`` on [lo, hi]."""
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = fn(d)
    x = 0.5 * (a + b)
    return x, fn(x)


def grid_max(fn, lo, hi, n=GRID_POINTS):
    """Maximum of ``fn`` over [lo, hi]: dense grid, then golden refinement.

    ``fn`` must accept numpy arrays. Returns ``(argmax, max)``.
    """
    if hi <= lo:
        x = float(lo)
        return x, float(fn(np.array([x]))[0])
    xs = np.linspace(lo, hi, n)
    vals = np.asarray(fn(xs), dtype=float)
    i = int(np.argmax(vals))
    best_x, best_v = float(xs[i]), float(vals[i])
    a = float(xs[max(i - 1, 0)])
    b = float(xs[min(i + 1, n - 1)])
    if b > a:
        x, v = golden_max(lambda s: float(fn(np.array([s]))[0]), a, b)
        if v > best_v:
            best_x, best_v = x, v
    return best_x, best_v


def grid_min(fn, lo, hi, n=GRID_POINTS):
    x, v = grid_max(lambda s: -np.asarray(fn(s), dtype=float), lo, hi, n)
    return x, -v


def bisect(fn, lo, hi, xtol=1e-12, max_iter=200):
    """Bisection on a sign-changing bracket; ``fn`` is scalar."""
    flo = fn(lo)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if hi - lo <= xtol:
            break
        fmid = fn(mid)
        if fmid == 0.0:
            return mid
        if (fmid > 0) == (flo > 0):
            lo, flo = mid, fmid
        else:
            hi = mid
    return 0.5 * (lo + hi)
