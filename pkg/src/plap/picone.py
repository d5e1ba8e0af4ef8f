"""Picone quantities for the p-Laplacian and a sub/supersolution comparison harness.

For u >= 0, v > 0

    L(u, v) = |grad u|^p + (p-1) (u/v)^p |grad v|^p
              - p (u/v)^(p-1) |grad v|^(p-2) grad v . grad u
    R(u, v) = |grad u|^p - |grad v|^(p-2) grad v . grad(u^p / v^(p-1))

agree pointwise, and L >= 0 with equality iff u is a constant multiple of v.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .fields import DiscreteFunction, _same_mesh, gradient
from .geometry import Mesh
from .solver import SolveOutcome, SolverConfig, energy_gradient, solve_semilinear

MODES = ("chain_rule", "interpolated")


@dataclass(frozen=True, eq=False)
class PiconeField:
    mesh: Mesh
    l_values: np.ndarray
    r_values: np.ndarray
    validity_mask: np.ndarray

    def max_identity_gap(self) -> float:
        v = self.validity_mask
        return float(np.max(np.abs(self.l_values[v] - self.r_values[v]), initial=0.0))

    def min_l(self) -> float:
        return float(np.min(self.l_values[self.validity_mask], initial=np.inf))

    def max_abs_l(self) -> float:
        return float(np.max(np.abs(self.l_values[self.validity_mask]), initial=0.0))

    def identity_holds(self, rtol: float = 1e-10) -> np.ndarray:
        """Per-cell flag |L - R| <= rtol (1 + max|L|) on valid cells."""
        bound = rtol * (1.0 + self.max_abs_l())
        return ~self.validity_mask | (np.abs(self.l_values - self.r_values) <= bound)

    def commutator_l1(self) -> float:
        """Integral of |L - R| over valid cells."""
        v = self.validity_mask
        return math.fsum(self.mesh.metric_volume[v] * np.abs(self.l_values[v] - self.r_values[v]))


def _pow_flux(g, p):
    n = np.linalg.norm(g, axis=1)
    s = np.where(n > 0, np.where(n > 0, n, 1.0) ** (p - 2), 0.0)
    return s[:, None] * g


def _taylor_remainder(a, b, p):
    """|a|^p - |b|^p - p |b|^(p-2) b.(a - b) per row, without cancellation for a ~ b."""
    d = a - b
    nb2 = np.einsum("cd,cd->c", b, b)
    bd = np.einsum("cd,cd->c", b, d)
    dd = np.einsum("cd,cd->c", d, d)
    safe = np.where(nb2 > 0, nb2, 1.0)
    rel = np.maximum((2 * bd + dd) / safe, -1.0)
    with np.errstate(divide="ignore"):  # rel = -1 when a = 0; expm1(-inf) = -1 is exact
        grow = np.expm1((p / 2) * np.log1p(rel))
    head = safe ** (p / 2) * grow - p * safe ** ((p - 2) / 2) * bd
    return np.where(nb2 > 0, head, dd ** (p / 2))


def picone_pointwise(mesh: Mesh, u: DiscreteFunction, v: DiscreteFunction, p: float,
                     mode: str = "chain_rule", floor: float | None = None) -> PiconeField:
    """Per-cell L and R from P1 gradients and cell-averaged u, v.

    L is evaluated as the Taylor remainder |a|^p - |b|^p - p|b|^(p-2) b.(a-b)
    with a = grad u, b = (u/v) grad v, which is the same quantity written
    without cancellation. R uses grad(u^p / v^(p-1)): expanded by the chain
    rule per cell in ``chain_rule`` mode, or the P1 gradient of the nodal
    interpolant in ``interpolated`` mode. Cells with a node where v <= floor
    (default 1e-8 max v) are masked invalid.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if not p > 1:
        raise ValueError("p must exceed 1")
    for fn in (u, v):
        if not _same_mesh(mesh, fn.mesh):
            raise ValueError("function does not live on this mesh")
    if np.any(u.values < 0):
        raise ValueError("u must be nonnegative")
    floor = 1e-8 * float(np.max(v.values)) if floor is None else floor
    cv = mesh.cell_values(v.values)
    valid = np.all(cv > floor, axis=1)
    ubar = mesh.cell_values(u.values).mean(axis=1)
    vbar = np.where(valid, cv.mean(axis=1), 1.0)
    ratio = np.where(valid, ubar / vbar, 0.0)
    gu = gradient(mesh, u).vectors
    gv = gradient(mesh, v).vectors

    L = _taylor_remainder(gu, ratio[:, None] * gv, p)
    if mode == "chain_rule":
        gw = p * (ratio ** (p - 1))[:, None] * gu - (p - 1) * (ratio ** p)[:, None] * gv
    else:
        pos = v.values > floor
        w = np.where(pos, u.values ** p / np.where(pos, v.values, 1.0) ** (p - 1), 0.0)
        gw = gradient(mesh, DiscreteFunction(mesh, w)).vectors
    gu_p = np.linalg.norm(gu, axis=1) ** p
    R = gu_p - np.einsum("cd,cd->c", _pow_flux(gv, p), gw)
    L = np.where(valid, L, np.nan)
    R = np.where(valid, R, np.nan)
    return PiconeField(mesh, L, R, valid)


def save_picone_csv(field: PiconeField, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_index", "L", "R", "valid"])
        for i, (a, b, ok) in enumerate(zip(field.l_values, field.r_values, field.validity_mask)):
            w.writerow([i, format(float(a), ".17g"), format(float(b), ".17g"), int(ok)])


def picone_integral(mesh: Mesh, u: DiscreteFunction, v: DiscreteFunction, p: float,
                    floor: float | None = None) -> tuple[float, float]:
    """(int |grad u|^p, int |grad v|^(p-2) grad v . grad w) with w = I(u^p / v^(p-1)).

    w is set to 0 where u = 0, so v may vanish there (e.g. on the boundary).
    """
    for fn in (u, v):
        if not _same_mesh(mesh, fn.mesh):
            raise ValueError("function does not live on this mesh")
    if np.any(u.values < 0):
        raise ValueError("u must be nonnegative")
    if mesh.boundary_nodes.size and np.any(u.values[mesh.boundary_nodes] != 0):
        raise ValueError("u must vanish on boundary nodes")
    floor = 1e-8 * float(np.max(v.values)) if floor is None else floor
    active = u.values > 0
    if np.any(v.values[active] <= floor):
        raise ValueError("v falls below the positivity floor where u > 0")
    w = np.zeros(mesh.n_vertices)
    w[active] = u.values[active] ** p / v.values[active] ** (p - 1)
    gu = gradient(mesh, u).vectors
    gv = gradient(mesh, v).vectors
    gw = gradient(mesh, DiscreteFunction(mesh, w)).vectors
    vol = mesh.metric_volume
    lhs = math.fsum(vol * np.linalg.norm(gu, axis=1) ** p)
    rhs = math.fsum(vol * np.einsum("cd,cd->c", _pow_flux(gv, p), gw))
    return lhs, rhs


@dataclass
class ComparisonReport:
    mu: float
    violations: int
    worst_gap: float                 # min over nodes of super - sub (negative means violation)
    sub_residual_max: float          # max nodal residual of the subsolution (should be <= 0)
    super_outcome: SolveOutcome
    from_sub: SolveOutcome
    from_above: SolveOutcome
    restart_gap: float               # max |fixed point from sub - fixed point from above|

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "violations": self.violations,
            "worst_gap": self.worst_gap,
            "sub_residual_max": self.sub_residual_max,
            "super_iterations": self.super_outcome.iterations,
            "super_converged": self.super_outcome.converged,
            "from_sub_iterations": self.from_sub.iterations,
            "from_above_iterations": self.from_above.iterations,
            "restart_gap": self.restart_gap,
        }


def comparison_check(mesh: Mesh, lam: float, h: DiscreteFunction, q: float, config: SolverConfig,
                     mu: float = 0.5, above: float = 2.0) -> ComparisonReport:
    """Order a solution of -Delta_p u = lam h u^q against the scaled subsolution mu*u.

    Besides the nodal ordering, the report checks that mu*u really is a
    subsolution (its discrete residual is nodally <= 0 up to tolerance) and
    reruns the fixed point from mu*u and from ``above``*u; by uniqueness both
    must return to u.
    """
    if not 0 < mu <= 1:
        raise ValueError("mu must lie in (0, 1]")
    sup = solve_semilinear(mesh, h, lam, q, config)
    u = sup.solution
    sub = u * mu
    tol = 10 * config.grad_tol
    diff = u.values - sub.values
    violations = int(np.sum(diff < -tol))
    data = DiscreteFunction(mesh, lam * h.values * sub.values ** q)
    res = energy_gradient(mesh, sub, data, config).values
    scale = float(np.max(np.abs(data.values * mesh.lumped_mass))) or 1.0
    a = solve_semilinear(mesh, h, lam, q, config, initial=sub)
    b = solve_semilinear(mesh, h, lam, q, config, initial=u * above)
    return ComparisonReport(mu, violations, float(diff.min()), float(res.max() / scale),
                            sup, a, b, float(np.max(np.abs(a.solution.values - b.solution.values))))
