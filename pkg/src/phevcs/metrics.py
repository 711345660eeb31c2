"""Trajectory comparison metrics: settling time, overshoot, sup-distance."""

import numpy as np


def settling_time(t, y, ref, band_frac=0.01, floor=1e-9):
    """First time after which |y - ref| stays within band_frac * |ref|.

    Returns inf if the trajectory leaves the band at its last sample
    (no settled tail observed), 0.0 if it never leaves the band.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    band = band_frac * max(abs(ref), floor)
    outside = np.abs(y - ref) > band
    if not outside.any():
        return 0.0
    last = int(np.nonzero(outside)[0][-1])
    if last + 1 >= t.size:
        return np.inf
    return float(t[last + 1])


def overshoot(y, ref):
    """Largest excursion |y - ref| over the trajectory."""
    return float(np.max(np.abs(np.asarray(y, dtype=float) - ref)))


def sup_distance(t_a, y_a, t_b, y_b, exclude=()):
    """Sup-norm distance after resampling onto the coarser time grid.

    `exclude` lists (t0, t1) windows removed from the comparison (e.g.
    one carrier period around a step disturbance edge).
    """
    t_a = np.asarray(t_a, dtype=float); y_a = np.asarray(y_a, dtype=float)
    t_b = np.asarray(t_b, dtype=float); y_b = np.asarray(y_b, dtype=float)
    if t_a.size >= t_b.size:
        t_c, y_c = t_b, y_b
        y_f = np.interp(t_b, t_a, y_a)
    else:
        t_c, y_c = t_a, y_a
        y_f = np.interp(t_a, t_b, y_b)
    lo = max(t_a[0], t_b[0])
    hi = min(t_a[-1], t_b[-1])
    keep = (t_c >= lo) & (t_c <= hi)
    for (w0, w1) in exclude:
        keep &= ~((t_c >= w0) & (t_c <= w1))
    if not keep.any():
        raise ValueError("no overlap left after exclusions")
    return float(np.max(np.abs(y_f[keep] - y_c[keep])))
