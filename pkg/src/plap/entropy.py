"""Entropy solutions for integrable data: approximation pipeline and certificates.

The pipeline solves -Delta_p u_n = f_n for a sequence of bounded data
f_n -> f and records, per stage, the diagnostics that the existence and
uniqueness arguments rely on: the truncated-energy bound, the entropy
identity against a bank of bounded test functions, Cauchy behaviour of the
gradients in measure, and the tail decay of u and |grad u|.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _simplex
from .fields import (
    DegenerateInputError,
    DiscreteFunction,
    DistributionCurve,
    _same_mesh,
    distribution_function,
    gradient,
    gradient_distribution,
    save_curve_csv,
    save_function_csv,
    tail_exponent_fit,
    truncate,
    truncate_values,
)
from .geometry import Mesh
from .solver import SolveOutcome, SolverConfig, solve_weak, _flux

SCHEDULE_MODES = ("truncate_data", "clip_and_rescale")


@dataclass(frozen=True)
class FitWindow:
    """Threshold range for a tail fit.

    ``kind="span"``: fractions of the log-span between the smallest and
    largest sampled threshold. ``kind="max"``: fractions of the largest
    threshold, i.e. k in [lo * k_max, hi * k_max].
    """

    kind: str = "span"
    lo: float = 0.4
    hi: float = 0.9

    def __post_init__(self):
        if self.kind not in ("span", "max"):
            raise ValueError("fit window kind must be 'span' or 'max'")
        if not 0 <= self.lo < self.hi <= 1:
            raise ValueError("fit window needs 0 <= lo < hi <= 1")

    def bounds(self, thresholds) -> tuple:
        k = np.asarray(thresholds)
        if self.kind == "max":
            return float(self.lo * k[-1]), float(self.hi * k[-1])
        logk = np.log(k)
        span = logk[-1] - logk[0]
        return float(np.exp(logk[0] + self.lo * span)), float(np.exp(logk[0] + self.hi * span))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lo": self.lo, "hi": self.hi}


DEFAULT_WINDOW = FitWindow()
# calibrated on the unit-square spike: between the boundary-offset regime and the
# few cells around the spike vertex
SPIKE_U_WINDOW = FitWindow("max", 0.02, 0.2)


@dataclass(frozen=True)
class ApproximationSchedule:
    levels: tuple
    mode: str = "truncate_data"

    def __post_init__(self):
        lv = tuple(float(x) for x in self.levels)
        if len(lv) < 2:
            raise ValueError("schedule needs at least 2 levels")
        if not all(math.isfinite(x) and x > 0 for x in lv):
            raise ValueError("schedule levels must be finite and positive")
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError("schedule levels must be strictly increasing")
        if self.mode not in SCHEDULE_MODES:
            raise ValueError(f"schedule mode must be one of {SCHEDULE_MODES}")
        object.__setattr__(self, "levels", lv)


# -- reference exponents ------------------------------------------------------------


def u_decay_exponent(N: int, p: float) -> float | None:
    """N(p-1)/(N-p), defined for 1 < p < N."""
    return N * (p - 1) / (N - p) if 1 < p < N else None


def grad_decay_exponent(N: int, p: float) -> float | None:
    """N(p-1)/(N-1), defined for 1 < p < N."""
    return N * (p - 1) / (N - 1) if 1 < p < N else None


def data_regularity_threshold(N: int, p: float) -> float:
    """Smallest q for which L^q data gives a finite-energy weak solution."""
    return N * p / (N * (p - 1) + p)


# -- data sequence ------------------------------------------------------------------


def lumped_l1(mesh: Mesh, values) -> float:
    return math.fsum(np.abs(values) * mesh.lumped_mass)


def make_data_sequence(f: DiscreteFunction, schedule: ApproximationSchedule) -> list:
    """Bounded approximations of ``f``, one per schedule level.

    ``truncate_data`` applies T_level nodally. ``clip_and_rescale`` clips the
    same way and then rescales the positive and negative parts separately so
    that their lumped integrals (hence the integral of f) are preserved; this
    keeps zero-mean data compatible on closed meshes.
    """
    mesh = f.mesh
    out = []
    for level in schedule.levels:
        t = truncate_values(f.values, level)
        if schedule.mode == "clip_and_rescale":
            m = mesh.lumped_mass
            pos, neg = np.maximum(t, 0.0), np.maximum(-t, 0.0)
            sp = math.fsum(np.maximum(f.values, 0.0) * m) / max(math.fsum(pos * m), 1e-300)
            sn = math.fsum(np.maximum(-f.values, 0.0) * m) / max(math.fsum(neg * m), 1e-300)
            t = sp * pos - sn * neg
        out.append(DiscreteFunction(mesh, t))
    return out


# -- entropy identity ---------------------------------------------------------------


def _check_test_function(mesh: Mesh, phi: DiscreteFunction):
    if not _same_mesh(mesh, phi.mesh):
        raise ValueError("test function does not live on this mesh")
    if mesh.boundary_nodes.size and np.any(phi.values[mesh.boundary_nodes] != 0):
        raise ValueError("test function must vanish on boundary nodes")


def _residual_parts(mesh, u, f, phi, k, p):
    g = gradient(mesh, u).vectors
    w = u.values - phi.values
    gw = mesh.gradient_operator @ w
    gw = gw.reshape(mesh.n_cells, mesh.ambient_dimension)
    band = _simplex.band_fraction(mesh.cell_values(w), k)
    flux = _flux(mesh, g, p, 0.0)  # already volume weighted
    lhs = math.fsum(np.einsum("cd,cd->c", flux, gw) * band)
    rhs = math.fsum(f.values * truncate_values(w, k) * mesh.lumped_mass)
    return lhs, rhs


def entropy_residual(mesh: Mesh, u: DiscreteFunction, f: DiscreteFunction,
                     phi: DiscreteFunction, k: float, p: float) -> float:
    """Signed LHS - RHS of the truncated test identity for one (phi, k).

    LHS integrates |grad u|^(p-2) grad u . grad(u - phi) over the exact set
    {|u - phi| < k} of the P1 interpolant; RHS is the lumped integral of
    T_k(u - phi) f.
    """
    if not k > 0:
        raise ValueError("truncation level k must be positive")
    _check_test_function(mesh, phi)
    lhs, rhs = _residual_parts(mesh, u, f, phi, k, p)
    return lhs - rhs


def default_test_bank(mesh: Mesh, u: DiscreteFunction, size: int = 5, seed: int = 0) -> list:
    """Bounded, boundary-vanishing test functions spanning the standard cases.

    In order: zero, a positive and a negative hat function at random interior
    vertices, a smooth bump, T_m(u) with m half the amplitude of u, then
    further hats and truncations if ``size`` asks for more.
    """
    rng = np.random.default_rng(seed)
    scale = u.max_abs() or 1.0
    free = mesh.interior_nodes
    n = mesh.n_vertices

    def hat(sign):
        v = np.zeros(n)
        v[free[rng.integers(free.size)]] = sign * scale
        return v

    def bump():
        centre = mesh.vertices[free[rng.integers(free.size)]]
        d = np.linalg.norm(mesh.vertices - centre, axis=1)
        radius = 0.25 * float(np.ptp(mesh.vertices, axis=0).max())
        v = scale * np.clip(1.0 - (d / radius) ** 2, 0.0, None) ** 2
        v[mesh.boundary_nodes] = 0.0
        return v

    bank = [np.zeros(n), hat(1.0), hat(-1.0), bump(), truncate_values(u.values, 0.5 * scale)]
    j = 0
    while len(bank) < size:
        kind = j % 3
        if kind == 0:
            bank.append(hat(1.0 if rng.random() < 0.5 else -1.0))
        elif kind == 1:
            bank.append(bump())
        else:
            bank.append(truncate_values(u.values, scale * rng.uniform(0.1, 0.9)))
        j += 1
    bank = bank[:size]
    out = []
    for v in bank:
        v = np.array(v)
        v[mesh.boundary_nodes] = 0.0
        out.append(DiscreteFunction(mesh, v))
    return out


def default_k_grid(u: DiscreteFunction, size: int = 5) -> np.ndarray:
    top = u.max_abs() or 1.0
    return np.geomspace(1e-2 * top, 2.0 * top, size)


@dataclass
class EntropyCertificate:
    max_abs: float
    argmax: tuple             # (test function index, k index)
    residuals: np.ndarray     # (bank, k)
    scaled: np.ndarray        # residual / ((k + |phi|_inf) |f|_1)
    max_scaled: float
    k_grid: np.ndarray

    def to_dict(self) -> dict:
        return {
            "max_abs": self.max_abs,
            "argmax": list(self.argmax),
            "max_scaled": self.max_scaled,
            "k_grid": self.k_grid.tolist(),
            "residuals": self.residuals.tolist(),
        }


def entropy_certificate(mesh: Mesh, u: DiscreteFunction, f: DiscreteFunction, k_grid,
                        test_bank, p: float) -> EntropyCertificate:
    """Worst-case entropy residual over a bank of test functions and a k grid."""
    ks = np.asarray(k_grid, dtype=float)
    if ks.size == 0 or len(test_bank) == 0:
        raise ValueError("k grid and test bank must be nonempty")
    f_l1 = lumped_l1(mesh, f.values)
    res = np.empty((len(test_bank), ks.size))
    scaled = np.empty_like(res)
    for i, phi in enumerate(test_bank):
        for j, k in enumerate(ks):
            res[i, j] = entropy_residual(mesh, u, f, phi, k, p)
            denom = (k + phi.max_abs()) * f_l1
            scaled[i, j] = abs(res[i, j]) / denom if denom > 0 else abs(res[i, j])
    idx = np.unravel_index(int(np.argmax(np.abs(res))), res.shape)
    return EntropyCertificate(float(np.abs(res).max()), (int(idx[0]), int(idx[1])), res,
                              scaled, float(scaled.max()), ks)


# -- estimates ----------------------------------------------------------------------


def truncated_energy(mesh: Mesh, u: DiscreteFunction, k: float, p: float) -> float:
    """Integral of |grad T_k(u)|^p with T_k applied nodally."""
    g = gradient(mesh, truncate(u, k)).magnitude
    return math.fsum(mesh.metric_volume * g ** p)


def band_energy(mesh: Mesh, u: DiscreteFunction, k: float, p: float) -> float:
    """Integral of |grad u|^p over the exact set {|u| < k} of the interpolant.

    Equal to ``truncated_energy`` except on cells crossed by the level set.
    """
    g = gradient(mesh, u).magnitude
    band = _simplex.band_fraction(mesh.cell_values(u.values), k)
    return math.fsum(mesh.metric_volume * g ** p * band)


@dataclass
class AprioriCheck:
    worst_ratio: float
    ratios: np.ndarray
    k_grid: np.ndarray
    band_ratios: np.ndarray | None = None


def apriori_estimate_check(mesh: Mesh, u: DiscreteFunction, f: DiscreteFunction, k_grid,
                           p: float) -> AprioriCheck:
    """max_k of int |grad T_k(u)|^p / (k |f|_1); at most 1 in the continuum.

    ``band_ratios`` carries the same ratio with the exact-band energy, which
    overshoots on the few cells where level sets cut through the support of
    concentrated data.
    """
    ks = np.asarray(k_grid, dtype=float)
    if ks.size == 0 or np.any(ks <= 0):
        raise ValueError("k grid must be nonempty and positive")
    f_l1 = lumped_l1(mesh, f.values)
    if f_l1 == 0:
        raise DegenerateInputError("data vanish; a-priori ratio undefined")
    ratios = np.array([truncated_energy(mesh, u, k, p) / (k * f_l1) for k in ks])
    band = np.array([band_energy(mesh, u, k, p) / (k * f_l1) for k in ks])
    return AprioriCheck(float(ratios.max()), ratios, ks, band)


def apriori_k_grid(u: DiscreteFunction, size: int = 16) -> np.ndarray:
    top = u.max_abs() or 1.0
    return np.geomspace(1e-3 * top, 2.0 * top, size)


@dataclass
class DecayFit:
    status: str                    # "ok", "not applicable", "no tail"
    reference: float | None
    exponent: float | None = None  # fitted decay rate (minus the log-log slope)
    intercept: float | None = None
    r_squared: float | None = None
    window: tuple | None = None
    curve: DistributionCurve | None = None
    rule: FitWindow | None = None

    @property
    def relative_error(self) -> float | None:
        if self.exponent is None or not self.reference:
            return None
        return abs(self.exponent - self.reference) / self.reference

    def to_dict(self) -> dict:
        return {"status": self.status, "reference": self.reference, "exponent": self.exponent,
                "intercept": self.intercept, "r_squared": self.r_squared,
                "window": list(self.window) if self.window else None,
                "window_rule": self.rule.to_dict() if self.rule else None,
                "relative_error": self.relative_error}


def _fit(curve, reference, window: FitWindow):
    if reference is None:
        return DecayFit("not applicable", None, curve=curve, rule=window)
    if curve.thresholds.size < 4:
        return DecayFit("no tail", reference, curve=curve, rule=window)
    k_lo, k_hi = window.bounds(curve.thresholds)
    try:
        slope, icpt, r2 = tail_exponent_fit(curve, k_lo, k_hi)
    except DegenerateInputError:
        return DecayFit("no tail", reference, window=(k_lo, k_hi), curve=curve, rule=window)
    return DecayFit("ok", reference, -slope, icpt, r2, (k_lo, k_hi), curve, window)


def u_decay_check(mesh: Mesh, u: DiscreteFunction, p: float, N: int | None = None,
                  window=DEFAULT_WINDOW, thresholds=None) -> DecayFit:
    """Tail exponent of meas{|u| > k} against N(p-1)/(N-p).

    ``window`` is a FitWindow; the default drops the smallest 40% and the
    largest 10% of the log-threshold span. Curves that vanish before the
    window (bounded u) report "no tail".
    """
    N = mesh.dimension if N is None else N
    curve = distribution_function(mesh, u, thresholds)
    return _fit(curve, u_decay_exponent(N, p), window)


def grad_decay_check(mesh: Mesh, u: DiscreteFunction, p: float, N: int | None = None,
                     window=DEFAULT_WINDOW, thresholds=None) -> DecayFit:
    """Tail exponent of meas{|grad u| > h} against N(p-1)/(N-1)."""
    N = mesh.dimension if N is None else N
    curve = gradient_distribution(mesh, gradient(mesh, u), thresholds)
    fit = _fit(curve, grad_decay_exponent(N, p), window)
    mag = gradient(mesh, u).magnitude
    if fit.status == "ok" and np.ptp(mag) <= 1e-12 * mag.max():
        return DecayFit("no tail", fit.reference, curve=curve, rule=window)
    return fit


def cauchy_in_measure(mesh: Mesh, solutions, t_grid):
    """meas{|grad u_n - grad u_m| > t} for every pair n < m and every t.

    Returns ``(pairs, table)`` with ``table[i, j]`` the measure for
    ``pairs[i]`` at ``t_grid[j]``.
    """
    if len(solutions) < 2:
        raise ValueError("need at least two solutions")
    for s in solutions:
        if not _same_mesh(mesh, s.mesh):
            raise ValueError("solutions live on different meshes")
    ts = np.asarray(t_grid, dtype=float)
    grads = [gradient(mesh, s).vectors for s in solutions]
    pairs = [(i, j) for i in range(len(solutions)) for j in range(i + 1, len(solutions))]
    table = np.empty((len(pairs), ts.size))
    for r, (i, j) in enumerate(pairs):
        d = np.linalg.norm(grads[i] - grads[j], axis=1)
        for c, t in enumerate(ts):
            table[r, c] = math.fsum(mesh.metric_volume[d > t])
    return pairs, table


def truncation_gap(mesh: Mesh, a: DiscreteFunction, b: DiscreteFunction, k: float, p: float) -> float:
    """|| grad T_k(a) - grad T_k(b) ||_p with nodal truncation."""
    d = gradient(mesh, truncate(a, k)).vectors - gradient(mesh, truncate(b, k)).vectors
    return math.fsum(mesh.metric_volume * np.linalg.norm(d, axis=1) ** p) ** (1.0 / p)


# -- pipeline -------------------------------------------------------------------------


@dataclass
class StageRecord:
    level: float | None            # None for the untruncated limit stage
    data_l1_gap: float
    outcome: SolveOutcome
    apriori: AprioriCheck
    certificate: EntropyCertificate

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "data_l1_gap": self.data_l1_gap,
            "converged": self.outcome.converged,
            "iterations": self.outcome.iterations,
            "final_residual": self.outcome.final_residual,
            "apriori_worst_ratio": self.apriori.worst_ratio,
            "apriori_ratios": self.apriori.ratios.tolist(),
            "apriori_band_ratios": (None if self.apriori.band_ratios is None
                                    else self.apriori.band_ratios.tolist()),
            "certificate_max_abs": self.certificate.max_abs,
            "certificate_max_scaled": self.certificate.max_scaled,
        }


@dataclass
class EntropyReport:
    p: float
    dimension: int
    stages: list
    apriori_k_grid: np.ndarray
    certificate: EntropyCertificate
    u_tail_fit: DecayFit
    grad_tail_fit: DecayFit
    truncation_k_grid: np.ndarray
    truncation_convergence: dict       # (i, j) -> array over k
    cauchy_t_grid: np.ndarray
    cauchy_measure: dict               # (i, j) -> array over t
    notes: list = field(default_factory=list)

    @property
    def stage_solutions(self) -> list:
        return [s.outcome.solution for s in self.stages]

    @property
    def candidate(self) -> DiscreteFunction:
        return self.stages[-1].outcome.solution

    @property
    def apriori_ratios(self) -> np.ndarray:
        return np.array([s.apriori.ratios for s in self.stages])

    @property
    def worst_apriori_ratio(self) -> float:
        conv = [s.apriori.worst_ratio for s in self.stages if s.outcome.converged]
        return max(conv) if conv else math.nan

    def to_dict(self) -> dict:
        def pairs(d):
            return [{"pair": list(k), "values": np.asarray(v).tolist()} for k, v in d.items()]

        return {
            "p": self.p,
            "dimension": self.dimension,
            "reference_exponents": {"u": u_decay_exponent(self.dimension, self.p),
                                    "grad": grad_decay_exponent(self.dimension, self.p)},
            "stages": [s.to_dict() for s in self.stages],
            "apriori_k_grid": self.apriori_k_grid.tolist(),
            "worst_apriori_ratio": self.worst_apriori_ratio,
            "entropy_certificate": self.certificate.to_dict(),
            "u_tail_fit": self.u_tail_fit.to_dict(),
            "grad_tail_fit": self.grad_tail_fit.to_dict(),
            "truncation_k_grid": self.truncation_k_grid.tolist(),
            "truncation_convergence": pairs(self.truncation_convergence),
            "cauchy_t_grid": self.cauchy_t_grid.tolist(),
            "cauchy_measure": pairs(self.cauchy_measure),
            "notes": list(self.notes),
        }


def run_approximation(mesh: Mesh, f: DiscreteFunction, schedule: ApproximationSchedule,
                      config: SolverConfig, *, pass_to_limit: bool = True, warm_start: bool = True,
                      k_grid=None, test_bank_size: int = 5, seed: int = 0,
                      u_window: FitWindow = DEFAULT_WINDOW, grad_window: FitWindow = DEFAULT_WINDOW,
                      t_grid=None) -> EntropyReport:
    """Solve the truncated problems along ``schedule`` and collect diagnostics.

    With ``pass_to_limit`` a final stage with the untruncated data is appended
    whenever the last level is below max|f|: on a fixed mesh the nodal data
    are bounded, so this stage is the limit of the sequence. Stages warm-start
    from their predecessor unless ``warm_start`` is false.
    """
    data = make_data_sequence(f, schedule)
    levels: list = list(schedule.levels)
    if pass_to_limit and schedule.levels[-1] < f.max_abs():
        data.append(f)
        levels.append(None)
    f_l1 = lumped_l1(mesh, f.values)
    stages = []
    prev = None
    notes = []
    for level, fn in zip(levels, data):
        out = solve_weak(mesh, fn, config, initial=prev if warm_start else None)
        if not out.converged:
            notes.append(f"stage at level {level} did not converge "
                         f"(relative residual {out.final_residual:.3e})")
        u = out.solution
        ks = apriori_k_grid(u)
        apri = (apriori_estimate_check(mesh, u, fn, ks, config.p) if lumped_l1(mesh, fn.values) > 0
                else AprioriCheck(0.0, np.zeros(ks.size), ks))
        kg = default_k_grid(u) if k_grid is None else np.asarray(k_grid, dtype=float)
        bank = default_test_bank(mesh, u, test_bank_size, seed)
        cert = entropy_certificate(mesh, u, fn, kg, bank, config.p)
        gap = lumped_l1(mesh, f.values - fn.values)
        stages.append(StageRecord(level, gap, out, apri, cert))
        prev = u

    sols = [s.outcome.solution for s in stages]
    cand = sols[-1]
    tk = default_k_grid(cand, 5)
    trunc, cauchy = {}, {}
    if t_grid is None:
        gmax = float(gradient(mesh, cand).magnitude.max()) or 1.0
        t_grid = np.geomspace(1e-3 * gmax, gmax, 8)
    t_grid = np.asarray(t_grid, dtype=float)
    if len(sols) >= 2:
        pairs, table = cauchy_in_measure(mesh, sols, t_grid)
        for r, pr in enumerate(pairs):
            cauchy[pr] = table[r]
            trunc[pr] = np.array([truncation_gap(mesh, sols[pr[0]], sols[pr[1]], k, config.p) for k in tk])
    if f_l1 == 0:
        notes.append("data vanish identically")
    return EntropyReport(
        p=config.p,
        dimension=mesh.dimension,
        stages=stages,
        apriori_k_grid=stages[-1].apriori.k_grid,
        certificate=stages[-1].certificate,
        u_tail_fit=u_decay_check(mesh, cand, config.p, window=u_window),
        grad_tail_fit=grad_decay_check(mesh, cand, config.p, window=grad_window),
        truncation_k_grid=tk,
        truncation_convergence=trunc,
        cauchy_t_grid=t_grid,
        cauchy_measure=cauchy,
        notes=notes,
    )


def write_report(report: EntropyReport, outdir) -> list:
    """report.json plus CSV files for stage solutions and tail curves; returns the paths."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    path = out / "report.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    paths.append(path)
    for i, s in enumerate(report.stages):
        p = out / f"stage_{i}_solution.csv"
        save_function_csv(s.outcome.solution, p)
        paths.append(p)
    for name, fit in (("u_tail_curve.csv", report.u_tail_fit), ("grad_tail_curve.csv", report.grad_tail_fit)):
        if fit.curve is not None:
            save_curve_csv(fit.curve, out / name)
            paths.append(out / name)
    return paths


# -- uniqueness ----------------------------------------------------------------------


@dataclass
class UniquenessReport:
    l1_gap: float
    relative_l1_gap: float
    linf_truncation_gap: float
    k_grid: np.ndarray
    report_a: EntropyReport
    report_b: EntropyReport
    last_truncated_gap: float | None = None   # relative L1 gap before the limit stage

    def to_dict(self) -> dict:
        return {"l1_gap": self.l1_gap, "relative_l1_gap": self.relative_l1_gap,
                "linf_truncation_gap": self.linf_truncation_gap, "k_grid": self.k_grid.tolist(),
                "last_truncated_stage_relative_gap": self.last_truncated_gap}


def uniqueness_crosscheck(mesh: Mesh, f: DiscreteFunction, schedule_a: ApproximationSchedule,
                          schedule_b: ApproximationSchedule, config: SolverConfig,
                          k_grid=None, **kwargs) -> UniquenessReport:
    """Run two independent pipelines and compare their candidate solutions.

    Pipeline a warm-starts each stage from the previous one, pipeline b starts
    every stage from zero, so the two differ in both data path and solver path.
    """
    from .fields import l1_norm

    ra = run_approximation(mesh, f, schedule_a, config, warm_start=True, **kwargs)
    rb = run_approximation(mesh, f, schedule_b, config, warm_start=False, **kwargs)
    ua, ub = ra.candidate, rb.candidate
    gap = l1_norm(mesh, ua - ub)
    base = l1_norm(mesh, ua)
    ks = default_k_grid(ua, 8) if k_grid is None else np.asarray(k_grid, dtype=float)
    linf = max(float(np.max(np.abs(truncate_values(ua.values, k) - truncate_values(ub.values, k))))
               for k in ks)
    before = None
    if ra.stages[-1].level is None and rb.stages[-1].level is None:
        sa, sb = ra.stages[-2].outcome.solution, rb.stages[-2].outcome.solution
        before = l1_norm(mesh, sa - sb) / max(l1_norm(mesh, sa), 1e-300)
    return UniquenessReport(gap, gap / base if base > 0 else gap, linf, ks, ra, rb, before)
