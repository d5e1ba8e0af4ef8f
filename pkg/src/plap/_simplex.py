"""Exact per-cell geometry of linear interpolants on segments and triangles.

Everything here works on arrays of nodal values gathered per cell,
``vals`` of shape (cells, dim + 1), and returns per-cell quantities relative
to the cell volume.
"""

import numpy as np


def superlevel_fraction(vals, k, strict=True):
    """Fraction of each cell where the linear interpolant exceeds ``k``.

    ``k`` may be a scalar or an array broadcastable against ``vals[:, 0]``.
    With ``strict=False`` the set is ``{u >= k}``; the two differ only on
    cells where the interpolant is constant and equal to ``k``.
    """
    s = np.sort(vals, axis=1)
    k = np.asarray(k, dtype=float)
    lo, hi = s[:, 0], s[:, -1]
    flat = hi == lo
    above = (lo > k) if strict else (lo >= k)
    span = np.where(flat, 1.0, hi - lo)
    if s.shape[1] == 2:
        frac = np.clip((hi - k) / span, 0.0, 1.0)
    else:
        mid = s[:, 1]
        d_lo = np.where(mid > lo, mid - lo, 1.0)
        d_hi = np.where(hi > mid, hi - mid, 1.0)
        lower = 1.0 - (k - lo) ** 2 / (span * d_lo)
        upper = (hi - k) ** 2 / (span * d_hi)
        frac = np.where(k <= lo, 1.0, np.where(k < mid, lower, np.where(k < hi, upper, 0.0)))
        frac = np.clip(frac, 0.0, 1.0)
    return np.where(flat, above.astype(float), frac)


def abs_superlevel_fraction(vals, k, strict=True):
    """Fraction of each cell where ``|u| > k`` (``k >= 0``)."""
    return superlevel_fraction(vals, k, strict) + superlevel_fraction(-vals, k, strict)


def band_fraction(vals, k):
    """Fraction of each cell where ``|u| < k`` (``k > 0``)."""
    return np.clip(1.0 - abs_superlevel_fraction(vals, k, strict=False), 0.0, 1.0)


def sign_split(vals):
    """Split each cell along the zero level set of its interpolant.

    Returns ``(pieces, weights)`` with ``pieces`` of shape
    (cells, n_pieces, dim + 1) holding the nodal values of the interpolant on
    sub-simplices that do not change sign, and ``weights`` of shape
    (cells, n_pieces) their volume fractions (some may be zero).
    """
    if vals.shape[1] == 2:
        a, b = vals[:, 0], vals[:, 1]
        cross = a * b < 0
        t = np.where(cross, a / np.where(cross, a - b, 1.0), 1.0)
        zero = np.zeros_like(a)
        pieces = np.stack([
            np.column_stack([a, np.where(cross, zero, b)]),
            np.column_stack([zero, b]),
        ], axis=1)
        weights = np.column_stack([t, 1.0 - t])
        return pieces, weights

    s = np.sort(vals, axis=1)
    v0, v1, v2 = s.T
    zero = np.zeros_like(v0)
    mixed = (v0 < 0) & (v2 > 0)
    apex_low = mixed & (v1 >= 0)
    apex_high = mixed & (v1 < 0)
    safe = lambda x: np.where(x == 0, 1.0, x)  # noqa: E731

    # single negative apex P0: A on P0P1, B on P0P2
    ta = np.where(apex_low, v0 / safe(v0 - v1), 0.0)
    tb = np.where(apex_low, v0 / safe(v0 - v2), 0.0)
    # single positive apex P2: A on P2P0, B on P2P1
    ua = np.where(apex_high, v2 / safe(v2 - v0), 0.0)
    ub = np.where(apex_high, v2 / safe(v2 - v1), 0.0)

    p_low = np.stack([
        np.column_stack([v0, zero, zero]),
        np.column_stack([zero, v1, v2]),
        np.column_stack([zero, v2, zero]),
    ], axis=1)
    w_low = np.column_stack([ta * tb, 1.0 - ta, ta * (1.0 - tb)])
    p_high = np.stack([
        np.column_stack([v2, zero, zero]),
        np.column_stack([zero, v0, v1]),
        np.column_stack([zero, v1, zero]),
    ], axis=1)
    w_high = np.column_stack([ua * ub, 1.0 - ua, ua * (1.0 - ub)])
    p_one = np.stack([s, np.zeros_like(s), np.zeros_like(s)], axis=1)
    w_one = np.column_stack([np.ones_like(v0), zero, zero])

    pieces = np.where(apex_low[:, None, None], p_low, np.where(apex_high[:, None, None], p_high, p_one))
    weights = np.where(apex_low[:, None], w_low, np.where(apex_high[:, None], w_high, w_one))
    return pieces, weights


def abs_power_mean(vals, q, rule):
    """Cell average of ``|u|**q`` for the linear interpolant.

    The cell is first split along ``u = 0`` so the integrand is smooth on
    every piece, then ``rule`` (a barycentric QuadratureRule) is applied.
    """
    pieces, weights = sign_split(vals)
    at_points = np.abs(np.einsum("qj,cpj->cpq", rule.points, pieces)) ** q
    return np.einsum("cpq,q,cp->c", at_points, rule.weights, weights)
