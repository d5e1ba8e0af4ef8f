"""Weak solutions of -div(|grad u|^(p-2) grad u) = f by convex energy minimization.

The discrete energy is

    J(u) = (1/p) sum_c vol_c (|g_c|^2 + eps^2)^(p/2) - sum_i f_i u_i m_i

with ``g_c`` the P1 gradient on cell ``c`` and ``m_i`` the lumped (vertex
quadrature) mass. J is strictly convex on the admissible space for p > 1,
so its unique minimizer is the discrete weak solution. Minimization uses a
damped Newton method with Armijo backtracking and, for p != 2, a continuation
in ``eps`` ending at the requested value (0 by default).

Data regularity: the bounded-data theory needs f in L^q with
q >= N p / (N (p - 1) + p); nothing here enforces that, since the entropy
pipeline feeds deliberately rough data through the same solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .fields import DiscreteFunction, _same_mesh
from .geometry import Mesh

BC_MODES = ("dirichlet_zero", "zero_mean")


class IncompatibleDataError(ValueError):
    """Data with nonzero mean on a closed manifold under the zero-mean gauge."""


@dataclass(frozen=True)
class SolverConfig:
    p: float
    epsilon: float = 0.0
    grad_tol: float = 1e-8
    max_iter: int = 200
    bc_mode: str = "dirichlet_zero"
    shrink: float = 0.5
    armijo: float = 1e-4
    epsilon0: float = 1e-2
    compat_tol: float = 1e-10

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError("p must exceed 1")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be nonnegative")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ValueError("max_iter must be a positive integer")
        if self.bc_mode not in BC_MODES:
            raise ValueError(f"bc_mode must be one of {BC_MODES}")
        if not 0 < self.shrink < 1:
            raise ValueError("line-search shrink factor must lie in (0, 1)")
        if not 0 < self.armijo < 0.5:
            raise ValueError("sufficient-decrease constant must lie in (0, 0.5)")
        if not self.epsilon0 > 0:
            raise ValueError("epsilon0 must be positive")

    @property
    def dual_exponent(self) -> float:
        return self.p / (self.p - 1.0)

    def check_mesh(self, mesh: Mesh):
        if self.bc_mode == "zero_mean" and not mesh.closed:
            raise ValueError("bc_mode zero_mean requires a closed mesh")
        if self.bc_mode == "dirichlet_zero" and mesh.closed:
            raise ValueError("bc_mode dirichlet_zero requires a mesh with boundary")


@dataclass
class SolveOutcome:
    solution: DiscreteFunction
    iterations: int
    final_residual: float
    energy_trace: list = field(default_factory=list)
    converged: bool = False
    residual_norm: float = 0.0

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "residual_norm": self.residual_norm,
            "converged": self.converged,
            "energy_trace": list(self.energy_trace),
        }


# -- energy, gradient, hessian --------------------------------------------------


def _cell_grads(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    return (mesh.gradient_operator @ u).reshape(mesh.n_cells, mesh.ambient_dimension)


def _check_pair(mesh, u, f):
    for fn in (u, f):
        if not _same_mesh(mesh, fn.mesh):
            raise ValueError("function does not live on this mesh")


def energy(mesh: Mesh, u: DiscreteFunction, f: DiscreteFunction, config: SolverConfig) -> float:
    _check_pair(mesh, u, f)
    return _energy(mesh, u.values, f.values * mesh.lumped_mass, config.p, config.epsilon)


def _energy(mesh, u, load, p, eps):
    g = _cell_grads(mesh, u)
    a = np.einsum("cd,cd->c", g, g) + eps * eps
    return math.fsum(mesh.metric_volume * a ** (p / 2)) / p - math.fsum(load * u)


def _energy_change(mesh, g, dg, load, delta, p, eps):
    """J(u + delta) - J(u), evaluated without cancellation between the two energies."""
    a = np.einsum("cd,cd->c", g, g) + eps * eps
    da = 2.0 * np.einsum("cd,cd->c", g, dg) + np.einsum("cd,cd->c", dg, dg)
    safe_a = np.where(a > 0, a, 1.0)
    ratio = np.maximum(da / safe_a, -1.0)
    term = np.where(a > 0, safe_a ** (p / 2) * np.expm1((p / 2) * np.log1p(ratio)),
                    np.maximum(da, 0.0) ** (p / 2))
    return math.fsum(mesh.metric_volume * term) / p - math.fsum(load * delta)


def _flux(mesh, g, p, eps):
    # |g|^(p-2) g -> 0 as g -> 0 for every p > 1, so a = 0 cells carry no flux
    a = np.einsum("cd,cd->c", g, g) + eps * eps
    s = np.where(a > 0, np.where(a > 0, a, 1.0) ** ((p - 2) / 2), 0.0)
    return (mesh.metric_volume * s)[:, None] * g


def _residual(mesh, u, load, p, eps):
    g = _cell_grads(mesh, u)
    return mesh.gradient_operator.T @ _flux(mesh, g, p, eps).ravel() - load


def energy_gradient(mesh: Mesh, u: DiscreteFunction, f: DiscreteFunction,
                    config: SolverConfig) -> DiscreteFunction:
    """Nodal residual of the discrete weak form; Dirichlet rows are zeroed."""
    _check_pair(mesh, u, f)
    r = _residual(mesh, u.values, f.values * mesh.lumped_mass, config.p, config.epsilon)
    if config.bc_mode == "dirichlet_zero":
        r[mesh.boundary_nodes] = 0.0
    return DiscreteFunction(mesh, r)


def _hessian(mesh, u, p, eps):
    g = _cell_grads(mesh, u)
    m, d = g.shape
    a = np.einsum("cd,cd->c", g, g) + eps * eps
    s = a ** ((p - 2) / 2)
    w = (p - 2) * a ** ((p - 4) / 2)
    blocks = s[:, None, None] * np.eye(d) + w[:, None, None] * np.einsum("ci,cj->cij", g, g)
    blocks *= mesh.metric_volume[:, None, None]
    idx = np.arange(m * d).reshape(m, d)
    rows = np.repeat(idx, d, axis=1).ravel()
    cols = np.tile(idx, (1, d)).ravel()
    block = sparse.csr_matrix((blocks.ravel(), (rows, cols)), shape=(m * d, m * d))
    G = mesh.gradient_operator
    return (G.T @ block @ G).tocsc()


# -- Newton driver ------------------------------------------------------------------


class _Problem:
    def __init__(self, mesh: Mesh, load: np.ndarray, config: SolverConfig):
        self.mesh = mesh
        self.load = load
        self.cfg = config
        self.p = config.p
        self.dirichlet = config.bc_mode == "dirichlet_zero"
        self.free = mesh.interior_nodes if self.dirichlet else np.arange(mesh.n_vertices)

    def restrict(self, r):
        return r[self.free] if self.dirichlet else r

    def newton_direction(self, u, r, eps_h):
        H = _hessian(self.mesh, u, self.p, eps_h)
        delta = np.zeros_like(u)
        if self.dirichlet:
            F = self.free
            delta[F] = spsolve(H[F][:, F], -r[F])
        else:
            mass = self.mesh.lumped_mass
            n = mass.size
            border = sparse.csc_matrix(mass[:, None])
            K = sparse.bmat([[H, border], [border.T, None]], format="csc")
            rhs = np.concatenate([-r, [-float(mass @ u)]])
            delta = spsolve(K, rhs)[:n]
        return delta


def _epsilon_stages(config: SolverConfig):
    target = config.epsilon
    if config.p == 2 or target >= config.epsilon0:
        return [target]
    stages, e = [], config.epsilon0
    floor = max(target, config.epsilon0 * 1e-5)
    while e > floor * (1 + 1e-12):
        stages.append(e)
        e *= 0.1
    stages.append(target)
    return stages


def solve_weak(mesh: Mesh, f: DiscreteFunction, config: SolverConfig,
               initial: DiscreteFunction | None = None) -> SolveOutcome:
    """Minimize the discrete energy; returns an outcome even without convergence.

    ``final_residual`` is the Euclidean norm of the free-node residual relative
    to that of the load vector (the residual at u = 0), evaluated at the
    requested ``config.epsilon``.
    """
    config.check_mesh(mesh)
    if not _same_mesh(mesh, f.mesh):
        raise ValueError("data does not live on this mesh")
    load = f.values * mesh.lumped_mass
    if config.bc_mode == "zero_mean":
        total, scale = math.fsum(load), math.fsum(np.abs(load))
        if abs(total) > config.compat_tol * max(scale, np.finfo(float).tiny):
            raise IncompatibleDataError(
                f"zero_mean gauge needs data with zero integral (got {total:.3e})")

    prob = _Problem(mesh, load, config)
    r0 = float(np.linalg.norm(prob.restrict(load)))
    if r0 == 0.0:
        zero = DiscreteFunction.zeros(mesh)
        return SolveOutcome(zero, 0, 0.0, [0.0 if config.epsilon == 0 else
                                           _energy(mesh, zero.values, load, config.p, config.epsilon)],
                            True, 0.0)

    u = np.zeros(mesh.n_vertices) if initial is None else np.array(initial.values, dtype=float)
    if prob.dirichlet:
        u[mesh.boundary_nodes] = 0.0
    else:
        u -= math.fsum(mesh.lumped_mass * u) / math.fsum(mesh.lumped_mass)

    stages = _epsilon_stages(config)
    p = config.p
    trace: list[float] = []
    iters = 0
    rel = np.inf
    prev_step = None
    for si, eps in enumerate(stages):
        last = si == len(stages) - 1
        tol = config.grad_tol if last else max(config.grad_tol, 1e-4)
        J = _energy(mesh, u, load, p, eps)
        trace.append(J)
        r = _residual(mesh, u, load, p, eps)
        rel = np.linalg.norm(prob.restrict(r)) / r0
        while rel > tol and iters < config.max_iter:
            iters += 1
            g = _cell_grads(mesh, u)
            gmax = float(np.sqrt(np.max(np.einsum("cd,cd->c", g, g)))) or 1.0
            # keeps the Hessian finite (p < 2) or nonsingular (p > 2) where g = 0
            eps_h = max(eps, (1e-14 if p < 2 else 1e-8) * gmax)
            delta = prob.newton_direction(u, r, eps_h)
            slope = float(prob.restrict(r) @ prob.restrict(delta))
            if not np.all(np.isfinite(delta)) or slope >= 0:
                # Barzilai-Borwein scaled steepest descent
                step = 1.0 / max(np.linalg.norm(r), 1e-300) if prev_step is None else prev_step
                delta = -step * r
                if prob.dirichlet:
                    delta[mesh.boundary_nodes] = 0.0
                else:
                    delta -= math.fsum(mesh.lumped_mass * delta) / math.fsum(mesh.lumped_mass)
                slope = float(prob.restrict(r) @ prob.restrict(delta))
            dg_full = _cell_grads(mesh, delta)
            t = 1.0
            while True:
                dJ = _energy_change(mesh, g, t * dg_full, load, t * delta, p, eps)
                if dJ <= config.armijo * t * slope:
                    break
                t *= config.shrink
                if t < 1e-14:
                    dJ = None
                    break
            if dJ is None:
                break
            u_new = u + t * delta
            r_new = _residual(mesh, u_new, load, p, eps)
            s_vec, y_vec = t * delta, r_new - r
            sy = float(s_vec @ y_vec)
            prev_step = float(s_vec @ s_vec) / sy if sy > 0 else None
            u, r = u_new, r_new
            J = J + dJ
            trace.append(J)
            rel = np.linalg.norm(prob.restrict(r)) / r0
        if iters >= config.max_iter and rel > tol:
            break
        if not last and rel > tol:
            break

    if stages[-1] != eps:
        r = _residual(mesh, u, load, p, config.epsilon)
        rel = np.linalg.norm(prob.restrict(r)) / r0
    converged = bool(rel <= config.grad_tol)
    return SolveOutcome(DiscreteFunction(mesh, u), iters, float(rel), trace, converged,
                        float(rel * r0))


# -- semilinear concave problem ---------------------------------------------------


def solve_semilinear(mesh: Mesh, h: DiscreteFunction, lam: float, q: float,
                     config: SolverConfig, initial: DiscreteFunction | None = None,
                     floor: float | None = None, max_outer: int = 1000,
                     accelerate: bool = True) -> SolveOutcome:
    """Positive solution of -Delta_p u = lam * h * u^q with 0 < q < p - 1.

    Fixed-point iteration u <- S(lam h max(u, floor)^q), where S solves the
    weak problem. Because S is (1/(p-1))-homogeneous, the map has degree
    r = q/(p-1) < 1; with ``accelerate`` each iterate's amplitude is reset to
    the fixed-point amplitude of its shape, leaving only the shape to converge.
    Stops once successive plain iterates differ by at most ``grad_tol`` in the
    max norm. ``energy_trace`` holds those max-norm defects.
    """
    p = config.p
    if not 0 < q < p - 1:
        raise ValueError("exponent q must lie in (0, p - 1)")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if config.bc_mode != "dirichlet_zero":
        raise ValueError("the semilinear problem needs bc_mode dirichlet_zero")
    if np.any(h.values < 0):
        raise ValueError("weight h must be nonnegative")
    if not np.any(h.values > 0):
        return SolveOutcome(DiscreteFunction.zeros(mesh), 0, 0.0, [0.0], True, 0.0)

    inner = replace(config, grad_tol=min(config.grad_tol * 1e-3, 1e-10), max_iter=max(config.max_iter, 200))
    r_deg = q / (p - 1)

    def apply(u):
        nonlocal inner_iters
        out = solve_weak(mesh, DiscreteFunction(mesh, lam * h.values * np.maximum(u.values, lo) ** q),
                         inner, initial=u)
        inner_iters += out.iterations
        return out

    inner_iters = 0
    if initial is None:
        first = solve_weak(mesh, DiscreteFunction(mesh, lam * h.values), inner)
        u = first.solution
    else:
        u = initial
    lo = floor if floor is not None else 1e-12 * max(u.max_abs(), 1e-300)
    defects = []
    converged = False
    for it in range(1, max_outer + 1):
        out = apply(u)
        t = DiscreteFunction(mesh, np.maximum(out.solution.values, 0.0))
        defect = float(np.max(np.abs(t.values - u.values)))
        defects.append(defect)
        if defect <= config.grad_tol:
            u = t
            converged = out.converged
            break
        if accelerate:
            s_u, s_t = u.max_abs(), t.max_abs()
            log_amp = (math.log(s_t) - r_deg * math.log(s_u)) / (1.0 - r_deg)
            if log_amp > 700:
                raise OverflowError("fixed-point amplitude overflows; reduce lambda or q")
            u = t * (math.exp(log_amp) / s_t)
        else:
            u = t
    return SolveOutcome(u, it, defects[-1], defects, converged, defects[-1])


# -- algebraic kernels ------------------------------------------------------------


def _norm(x):
    return np.sqrt(np.sum(np.asarray(x, dtype=float) ** 2, axis=-1))


def _flux_vec(x, p):
    n = _norm(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(n > 0, n, 1.0) ** (p - 2)
    return np.where(n[..., None] > 0, s[..., None] * x, 0.0)


def monotonicity_pairing(xi, eta, p: float):
    """<|xi|^(p-2) xi - |eta|^(p-2) eta, xi - eta>, vectorized over leading axes."""
    if not p > 1:
        raise ValueError("p must exceed 1")
    xi, eta = np.asarray(xi, dtype=float), np.asarray(eta, dtype=float)
    return np.sum((_flux_vec(xi, p) - _flux_vec(eta, p)) * (xi - eta), axis=-1)


@dataclass(frozen=True)
class InequalityConstants:
    """Constants C(p) for the three inequalities that carry one.

    ``upper_small_p`` bounds the Taylor remainder for p <= 2 from above,
    ``lower_small_p`` and ``lower_large_p`` are the coercivity constants.
    """

    upper_small_p: float
    lower_small_p: float
    lower_large_p: float

    @classmethod
    def conservative(cls, p: float) -> "InequalityConstants":
        """Safe closed-form choices; ``calibrate_constants`` gives sharper ones.

        For p > 2 the coercivity constant is Lindqvist's
        (2^p - 1) / (2^(p-1) - 1).
        """
        large = (2 ** p - 1) / (2 ** (p - 1) - 1) if p > 2 else 1.0
        return cls(1.25 * 2 ** (2 - p) if p <= 2 else 1.0, (p - 1) / 2 if p <= 2 else 0.5, large)


@dataclass(frozen=True)
class InequalitySlacks:
    """RHS - LHS for each inequality; NaN for the branch not selected by p."""

    remainder_small_p: np.ndarray
    coercive_small_p: np.ndarray
    remainder_large_p: np.ndarray
    coercive_large_p: np.ndarray

    def active(self):
        return [s for s in (self.remainder_small_p, self.coercive_small_p,
                            self.remainder_large_p, self.coercive_large_p)
                if not np.all(np.isnan(s))]


def algebraic_inequalities(xi1, xi2, p: float,
                           constants: InequalityConstants | None = None) -> InequalitySlacks:
    """Slacks of the p-power Taylor inequalities for vector pairs.

    For p <= 2:
        |x1+x2|^p - |x1|^p - p|x1|^(p-2)<x1,x2> <= C |x2|^p
        |x2|^p - |x1|^p - p|x1|^(p-2)<x1,x2-x1> >= C |x2-x1|^2 / (|x2|+|x1|)^(2-p)
    For p > 2:
        |x1+x2|^p - |x1|^p - p|x1|^(p-2)<x1,x2> <= p(p-1)/2 (|x1|+|x2|)^(p-2) |x2|^2
        |x2|^p - |x1|^p - p|x1|^(p-2)<x1,x2-x1> >= C/(2^p - 1) |x2-x1|^p
    """
    if not p > 1:
        raise ValueError("p must exceed 1")
    if constants is None:
        constants = InequalityConstants.conservative(p)
    x1, x2 = np.asarray(xi1, dtype=float), np.asarray(xi2, dtype=float)
    n1, n2 = _norm(x1), _norm(x2)
    f1 = _flux_vec(x1, p)
    remainder = _norm(x1 + x2) ** p - n1 ** p - p * np.sum(f1 * x2, axis=-1)
    gap = n2 ** p - n1 ** p - p * np.sum(f1 * (x2 - x1), axis=-1)
    nd = _norm(x2 - x1)
    nan = np.full(np.broadcast(n1, n2).shape, np.nan)
    if p <= 2:
        denom = (n1 + n2) ** (2 - p)
        with np.errstate(divide="ignore", invalid="ignore"):
            coerc = np.where(nd > 0, nd ** 2 / np.where(denom > 0, denom, 1.0), 0.0)
        return InequalitySlacks(constants.upper_small_p * n2 ** p - remainder,
                                gap - constants.lower_small_p * coerc, nan, nan)
    bound = p * (p - 1) / 2 * (n1 + n2) ** (p - 2) * n2 ** 2
    return InequalitySlacks(nan, nan, bound - remainder,
                            gap - constants.lower_large_p / (2 ** p - 1) * nd ** p)


def sample_vector_pairs(n: int, dim: int, rng: np.random.Generator):
    """Random vector pairs with magnitudes spread over several decades.

    One pair in eight is made nearly parallel or antiparallel, where the
    inequality constants are typically extremal.
    """
    x1 = rng.standard_normal((n, dim)) * np.exp(rng.uniform(-4, 4, (n, 1)))
    x2 = rng.standard_normal((n, dim)) * np.exp(rng.uniform(-4, 4, (n, 1)))
    aligned = rng.random(n) < 0.125
    scale = rng.uniform(-3, 3, aligned.sum())[:, None]
    x2[aligned] = x1[aligned] * scale + 1e-3 * x2[aligned] * np.abs(scale)
    return x1, x2


def calibrate_constants(p: float, n_samples: int = 10**6, seed: int = 0,
                        margin: float = 0.9, dim: int = 3) -> InequalityConstants:
    """Empirical admissible C(p), shrunk (or inflated) by ``margin`` for safety.

    Upper-bound constants are the sampled supremum divided by ``margin``;
    lower-bound constants the sampled infimum times ``margin``.
    """
    rng = np.random.default_rng(seed)
    x1, x2 = sample_vector_pairs(n_samples, dim, rng)
    probe = InequalityConstants(0.0, 0.0, 0.0)
    s = algebraic_inequalities(x1, x2, p, probe)
    n2 = _norm(x2)
    nd = _norm(x2 - x1)
    if p <= 2:
        keep = n2 > 0
        upper = float(np.max(-s.remainder_small_p[keep] / n2[keep] ** p))
        denom = (_norm(x1) + n2) ** (2 - p)
        ok = nd > 0
        lower = float(np.min(s.coercive_small_p[ok] * denom[ok] / nd[ok] ** 2))
        return InequalityConstants(upper / margin, lower * margin, 1.0)
    ok = nd > 0
    lower = float(np.min(s.coercive_large_p[ok] * (2 ** p - 1) / nd[ok] ** p))
    return InequalityConstants(1.0, 0.1, lower * margin)
