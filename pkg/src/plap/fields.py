"""Discrete functions on meshes and their functional-analytic diagnostics.

Functions are continuous piecewise-linear (P1) interpolants of nodal values.
Superlevel-set measures are computed from the exact geometry of the
interpolant in each cell, so distribution functions of affine data are exact.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import _simplex
from .geometry import Mesh, QuadratureRule, integrate

DEFAULT_THRESHOLDS = 64


class DegenerateInputError(ValueError):
    """Raised when a requested ratio or fit is undefined for the given input."""


def _same_mesh(a: Mesh, b: Mesh) -> bool:
    return a is b or a.fingerprint == b.fingerprint


@dataclass(frozen=True, eq=False)
class DiscreteFunction:
    """Nodal values of a P1 function on ``mesh``."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != (self.mesh.n_vertices,):
            raise ValueError(f"expected {self.mesh.n_vertices} nodal values, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("nodal values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def interpolate(cls, mesh: Mesh, func) -> "DiscreteFunction":
        """Nodal interpolant of ``func`` evaluated on the vertex coordinate array."""
        return cls(mesh, np.asarray(func(mesh.vertices), dtype=float).reshape(mesh.n_vertices))

    @classmethod
    def zeros(cls, mesh: Mesh) -> "DiscreteFunction":
        return cls(mesh, np.zeros(mesh.n_vertices))

    def _check(self, other: "DiscreteFunction"):
        if not _same_mesh(self.mesh, other.mesh):
            raise ValueError("discrete functions live on different meshes")
        return other.values

    def __add__(self, other):
        if isinstance(other, DiscreteFunction):
            return DiscreteFunction(self.mesh, self.values + self._check(other))
        return DiscreteFunction(self.mesh, self.values + other)

    def __sub__(self, other):
        if isinstance(other, DiscreteFunction):
            return DiscreteFunction(self.mesh, self.values - self._check(other))
        return DiscreteFunction(self.mesh, self.values - other)

    def __mul__(self, scalar):
        return DiscreteFunction(self.mesh, self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return DiscreteFunction(self.mesh, -self.values)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


@dataclass(frozen=True, eq=False)
class GradientField:
    """Cellwise-constant tangent vectors, in ambient coordinates (cells, ambient_dim)."""

    mesh: Mesh
    vectors: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.einsum("cd,cd->c", self.vectors, self.vectors))


@dataclass(frozen=True)
class DistributionCurve:
    """Sampled distribution function k -> meas{|u| > k}."""

    thresholds: np.ndarray
    measures: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.thresholds, dtype=float)
        m = np.asarray(self.measures, dtype=float)
        if k.shape != m.shape or k.ndim != 1:
            raise ValueError("thresholds and measures must be 1-D arrays of equal length")
        if k.size and (k[0] <= 0 or np.any(np.diff(k) <= 0)):
            raise ValueError("thresholds must be positive and strictly increasing")
        if np.any(m < 0) or np.any(np.diff(m) > 0):
            raise ValueError("measures must be nonnegative and non-increasing")
        object.__setattr__(self, "thresholds", k)
        object.__setattr__(self, "measures", m)


# -- pointwise operations -----------------------------------------------------


def truncate_values(values, k: float) -> np.ndarray:
    """T_k applied elementwise: clamp to [-k, k]."""
    if not k > 0:
        raise ValueError("truncation level k must be positive")
    return np.clip(values, -k, k)


def truncate(u: DiscreteFunction, k: float) -> DiscreteFunction:
    return DiscreteFunction(u.mesh, truncate_values(u.values, k))


def gradient(mesh: Mesh, u: DiscreteFunction) -> GradientField:
    if not _same_mesh(mesh, u.mesh):
        raise ValueError("function does not live on this mesh")
    vecs = np.einsum("cdk,ck->cd", mesh.cell_gradient_basis, mesh.cell_values(u.values))
    return GradientField(mesh, vecs)


@dataclass(frozen=True)
class TruncationCheck:
    """Discrepancies of grad T_k(u) against grad(u) * 1{|u| < k}, split by cell type."""

    interior_max: float      # cells with all |u| < k: max |grad T_k u - grad u|
    exterior_max: float      # cells with all |u| > k on one side: max |grad T_k u|
    interior_cells: int
    exterior_cells: int
    mixed_cells: int


def truncation_gradient_check(mesh: Mesh, u: DiscreteFunction, k: float) -> TruncationCheck:
    if not k > 0:
        raise ValueError("truncation level k must be positive")
    vals = mesh.cell_values(u.values)
    interior = np.all(np.abs(vals) < k, axis=1)
    exterior = np.all(vals > k, axis=1) | np.all(vals < -k, axis=1)
    g = gradient(mesh, u).vectors
    gt = gradient(mesh, truncate(u, k)).vectors
    diff = np.linalg.norm(gt - g, axis=1)
    tmag = np.linalg.norm(gt, axis=1)
    return TruncationCheck(
        interior_max=float(diff[interior].max(initial=0.0)),
        exterior_max=float(tmag[exterior].max(initial=0.0)),
        interior_cells=int(interior.sum()),
        exterior_cells=int(exterior.sum()),
        mixed_cells=int((~interior & ~exterior).sum()),
    )


# -- norms ------------------------------------------------------------------------


def _gauss(mesh: Mesh) -> QuadratureRule:
    return QuadratureRule.gauss(mesh.dimension, 8)


def abs_power_integral(mesh: Mesh, u: DiscreteFunction, p: float) -> float:
    """Integral of |u|^p, sign-split per cell so the quadrature sees smooth integrands."""
    means = _simplex.abs_power_mean(mesh.cell_values(u.values), p, _gauss(mesh))
    return integrate(mesh, means)


def lp_norm(mesh: Mesh, u: DiscreteFunction, p: float) -> float:
    if not p >= 1:
        raise ValueError("p must be >= 1")
    return abs_power_integral(mesh, u, p) ** (1.0 / p)


def grad_lp_norm(mesh: Mesh, g: GradientField, p: float) -> float:
    if not p >= 1:
        raise ValueError("p must be >= 1")
    return integrate(mesh, g.magnitude ** p) ** (1.0 / p)


def w1p_norm(mesh: Mesh, u: DiscreteFunction, p: float) -> float:
    return grad_lp_norm(mesh, gradient(mesh, u), p) + lp_norm(mesh, u, p)


def mean_value(mesh: Mesh, u: DiscreteFunction) -> float:
    """Volume-weighted average; the midpoint rule is exact for P1 functions."""
    return integrate(mesh, mesh.cell_values(u.values).mean(axis=1)) / mesh.total_volume


def l1_norm(mesh: Mesh, u: DiscreteFunction) -> float:
    return abs_power_integral(mesh, u, 1.0)


def poincare_ratio(mesh: Mesh, u: DiscreteFunction, p: float) -> float:
    """||u - mean(u)||_p / ||grad u||_p."""
    denom = grad_lp_norm(mesh, gradient(mesh, u), p)
    if denom == 0:
        raise DegenerateInputError("gradient vanishes identically; Poincare ratio undefined")
    return lp_norm(mesh, u - mean_value(mesh, u), p) / denom


# -- distribution functions -------------------------------------------------------


def default_thresholds(values, n: int = DEFAULT_THRESHOLDS) -> np.ndarray:
    """Log-spaced thresholds between the smallest positive and the largest |value|."""
    a = np.abs(np.asarray(values, dtype=float))
    pos = a[a > 0]
    if not pos.size:
        return np.empty(0)
    lo, hi = float(pos.min()), float(pos.max())
    # roundoff-level spreads (e.g. |grad u| of an affine u) collapse to one threshold
    if hi <= lo * (1 + 1e-12):
        return np.array([lo])
    return np.geomspace(lo, hi, n)


def _check_thresholds(thresholds):
    k = np.asarray(thresholds, dtype=float)
    if k.ndim != 1 or (k.size and (k[0] <= 0 or np.any(np.diff(k) <= 0))):
        raise ValueError("thresholds must be positive and strictly increasing")
    return k


def superlevel_measures(mesh: Mesh, values, thresholds, strict: bool = True,
                        chunk: int = 256) -> np.ndarray:
    """meas{|u| > k} (or >= k) of the P1 interpolant for each threshold."""
    vals = mesh.cell_values(values)
    k = np.asarray(thresholds, dtype=float)
    out = np.empty(k.size)
    for start in range(0, k.size, chunk):
        block = k[start:start + chunk, None]
        frac = _simplex.abs_superlevel_fraction(vals, block, strict)
        weighted = frac * mesh.metric_volume
        out[start:start + chunk] = [math.fsum(row) for row in weighted]
    return out


def distribution_function(mesh: Mesh, u: DiscreteFunction, thresholds=None) -> DistributionCurve:
    k = default_thresholds(u.values) if thresholds is None else _check_thresholds(thresholds)
    meas = superlevel_measures(mesh, u.values, k)
    # nested superlevel sets; removes last-ulp noise from per-cell sums
    meas = np.minimum.accumulate(np.clip(meas, 0.0, mesh.total_volume))
    return DistributionCurve(k, meas)


def gradient_distribution(mesh: Mesh, g: GradientField, thresholds=None) -> DistributionCurve:
    """Distribution function of the cellwise-constant |grad u|."""
    mag = g.magnitude
    k = default_thresholds(mag) if thresholds is None else _check_thresholds(thresholds)
    order = np.argsort(mag, kind="stable")
    sorted_mag = mag[order]
    vol_sorted = mesh.metric_volume[order]
    meas = np.empty(k.size)
    for i, t in enumerate(k):
        start = np.searchsorted(sorted_mag, t, side="right")
        meas[i] = math.fsum(vol_sorted[start:])
    return DistributionCurve(k, meas)


def marcinkiewicz_norm(curve: DistributionCurve, q: float) -> float:
    """sup_k k^q phi(k) over the sampled thresholds (a lower bound for the inf-C functional)."""
    if not q > 0:
        raise ValueError("q must be positive")
    if curve.thresholds.size == 0:
        raise ValueError("empty distribution curve")
    return float(np.max(curve.thresholds ** q * curve.measures))


def layer_cake_check(mesh: Mesh, u: DiscreteFunction, q: float,
                     n_thresholds: int = 10_000) -> tuple[float, float]:
    """Compare the integral of |u|^q with q * int_0^max t^(q-1) phi(t) dt.

    The right side uses a product trapezoid rule: phi is interpolated
    linearly between thresholds (left limit at the right end of each panel)
    and integrated against q t^(q-1) in closed form, so step distributions of
    constant functions are integrated exactly.
    """
    if not q >= 1:
        raise ValueError("q must be >= 1")
    lhs = abs_power_integral(mesh, u, q)
    top = u.max_abs()
    if top == 0:
        return lhs, 0.0
    t = np.linspace(0.0, top, int(n_thresholds) + 1)
    right = superlevel_measures(mesh, u.values, t, strict=True)
    left = superlevel_measures(mesh, u.values, t, strict=False)
    a, b = t[:-1], t[1:]
    fa, fb = right[:-1], left[1:]
    slope = (fb - fa) / (b - a)
    # int_a^b q t^(q-1) (fa + slope (t - a)) dt
    pw_q = b ** q - a ** q
    pw_q1 = b ** (q + 1) - a ** (q + 1)
    panels = (fa - slope * a) * pw_q + slope * q / (q + 1) * pw_q1
    return lhs, math.fsum(panels)


def tail_exponent_fit(curve: DistributionCurve, k_lo: float, k_hi: float):
    """Least-squares line through (log k, log phi(k)) on [k_lo, k_hi].

    Returns ``(slope, intercept, r_squared)``; slope estimates -q for
    phi ~ C k^-q and intercept estimates log C.
    """
    k, m = curve.thresholds, curve.measures
    sel = (k >= k_lo) & (k <= k_hi) & (m > 0)
    if sel.sum() < 4:
        raise DegenerateInputError("need at least 4 positive samples in the fit window")
    x, y = np.log(k[sel]), np.log(m[sel])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return float(slope), float(intercept), r2


# -- CSV serialization ------------------------------------------------------------


def _fmt(x) -> str:
    return format(float(x), ".17g")


def save_function_csv(u: DiscreteFunction, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_index", "value"])
        for i, v in enumerate(u.values):
            w.writerow([i, _fmt(v)])


def load_function_csv(mesh: Mesh, path) -> DiscreteFunction:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["node_index", "value"]:
        raise ValueError(f"{path}: expected header 'node_index,value'")
    vals = np.full(mesh.n_vertices, np.nan)
    for line, row in enumerate(rows[1:], start=2):
        try:
            idx, val = int(row[0]), float(row[1])
        except (ValueError, IndexError):
            raise ValueError(f"{path}: line {line}: malformed row") from None
        if not 0 <= idx < mesh.n_vertices:
            raise ValueError(f"{path}: line {line}: node index out of range")
        vals[idx] = val
    if np.isnan(vals).any():
        raise ValueError(f"{path}: missing values for some nodes")
    return DiscreteFunction(mesh, vals)


def save_curve_csv(curve: DistributionCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "measure"])
        for k, m in zip(curve.thresholds, curve.measures):
            w.writerow([_fmt(k), _fmt(m)])


def load_curve_csv(path) -> DistributionCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["k", "measure"]:
        raise ValueError(f"{path}: expected header 'k,measure'")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]]).reshape(-1, 2)
    return DistributionCurve(data[:, 0], data[:, 1])
