import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plap.benchmarks import spike
from plap.entropy import (
    ApproximationSchedule,
    FitWindow,
    apriori_estimate_check,
    apriori_k_grid,
    band_energy,
    cauchy_in_measure,
    data_regularity_threshold,
    default_k_grid,
    default_test_bank,
    entropy_certificate,
    entropy_residual,
    grad_decay_check,
    grad_decay_exponent,
    lumped_l1,
    make_data_sequence,
    run_approximation,
    truncated_energy,
    u_decay_check,
    u_decay_exponent,
    uniqueness_crosscheck,
    write_report,
)
from plap.fields import DegenerateInputError, DiscreteFunction, DistributionCurve
from plap.geometry import build_flat_torus_mesh, build_interval_mesh, build_rectangle_mesh
from plap.solver import SolverConfig, energy_gradient, solve_weak


@pytest.fixture(scope="module")
def square():
    return build_rectangle_mesh(16, 16)


@pytest.fixture(scope="module")
def spike_solution(square):
    f = spike(square)
    return f, solve_weak(square, f, SolverConfig(p=1.5)).solution


# -- reference exponents --------------------------------------------------------------


def test_reference_exponents():
    assert u_decay_exponent(2, 1.5) == pytest.approx(2.0)
    assert u_decay_exponent(2, 1.8) == pytest.approx(8.0)
    assert grad_decay_exponent(2, 1.5) == pytest.approx(1.0)
    assert grad_decay_exponent(3, 2.0) == pytest.approx(1.5)
    assert u_decay_exponent(2, 2.0) is None and grad_decay_exponent(1, 1.5) is None
    assert data_regularity_threshold(2, 2.0) == pytest.approx(1.0)


# -- schedules and data -----------------------------------------------------------------


@pytest.mark.parametrize("levels", [(1.0,), (2.0, 1.0), (1.0, math.inf), (0.0, 1.0)])
def test_schedule_rejects(levels):
    with pytest.raises(ValueError):
        ApproximationSchedule(levels)
    with pytest.raises(ValueError):
        ApproximationSchedule((1.0, 2.0), mode="smooth")


def test_data_sequence_examples(square):
    f = spike(square)
    top = f.max_abs()
    a, b = make_data_sequence(f, ApproximationSchedule((2.0, top)))
    assert np.array_equal(b.values, f.values)
    changed = f.values != a.values
    assert changed.sum() == 1 and a.values[changed][0] == 2.0


def test_clip_and_rescale_preserves_integral():
    torus = build_flat_torus_mesh(10, 10)
    vals = np.zeros(torus.n_vertices)
    vals[5], vals[50] = 1 / torus.lumped_mass[5], -1 / torus.lumped_mass[50]
    vals += 0.3 * np.sin(2 * np.pi * torus.vertices[:, 0])
    f = DiscreteFunction(torus, vals)
    for fn in make_data_sequence(f, ApproximationSchedule((5.0, 20.0), "clip_and_rescale")):
        assert math.fsum(fn.values * torus.lumped_mass) == pytest.approx(
            math.fsum(vals * torus.lumped_mass), abs=1e-13)
        assert lumped_l1(torus, fn.values) == pytest.approx(lumped_l1(torus, vals), rel=1e-12)


# -- entropy residual and certificate ---------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 10.0), st.floats(1.1, 4.0))
def test_residual_vanishes_for_phi_equal_u(seed, k, p):
    mesh = build_rectangle_mesh(5, 5)
    rng = np.random.default_rng(seed)
    vals = np.zeros(mesh.n_vertices)
    vals[mesh.interior_nodes] = rng.standard_normal(mesh.interior_nodes.size)
    u = DiscreteFunction(mesh, vals)
    f = DiscreteFunction(mesh, rng.standard_normal(mesh.n_vertices))
    assert entropy_residual(mesh, u, f, u, k, p) == 0.0


def test_residual_reduces_to_weak_form(square):
    rng = np.random.default_rng(2)
    cfg = SolverConfig(p=2.5)
    vals = np.zeros(square.n_vertices)
    vals[square.interior_nodes] = rng.uniform(0, 1, square.interior_nodes.size)
    u = DiscreteFunction(square, vals)
    f = DiscreteFunction(square, rng.standard_normal(square.n_vertices))
    zero = DiscreteFunction.zeros(square)
    k = 2 * u.max_abs()
    weak = float(energy_gradient(square, u, f, cfg).values @ u.values)
    assert entropy_residual(square, u, f, zero, k, 2.5) == pytest.approx(weak, rel=1e-12, abs=1e-15)


def test_residual_input_validation(square, spike_solution):
    f, u = spike_solution
    bad = DiscreteFunction(square, np.ones(square.n_vertices))
    with pytest.raises(ValueError, match="boundary"):
        entropy_residual(square, u, f, bad, 1.0, 1.5)
    with pytest.raises(ValueError):
        entropy_residual(square, u, f, u, 0.0, 1.5)


def test_test_bank_shape(square, spike_solution):
    _, u = spike_solution
    bank = default_test_bank(square, u, size=7, seed=3)
    assert len(bank) == 7 and np.all(bank[0].values == 0)
    for phi in bank:
        assert np.all(phi.values[square.boundary_nodes] == 0)
    # larger banks extend smaller ones, so the certificate max can only grow
    small = default_test_bank(square, u, size=5, seed=3)
    for a, b in zip(small, bank):
        assert np.array_equal(a.values, b.values)


def test_certificate_monotone_in_bank(square, spike_solution):
    f, u = spike_solution
    ks = default_k_grid(u)
    c5 = entropy_certificate(square, u, f, ks, default_test_bank(square, u, 5), 1.5)
    c10 = entropy_certificate(square, u, f, ks, default_test_bank(square, u, 10), 1.5)
    assert c10.max_abs >= c5.max_abs
    with pytest.raises(ValueError):
        entropy_certificate(square, u, f, [], default_test_bank(square, u, 5), 1.5)


def test_bounded_data_certificate_1d():
    mesh = build_interval_mesh(128)
    f = DiscreteFunction.interpolate(mesh, lambda x: 1 + np.cos(3 * x[:, 0]))
    cfg = SolverConfig(p=1.7)
    rep = run_approximation(mesh, f, ApproximationSchedule((3.0, 4.0)), cfg)
    assert len(rep.stages) == 2
    assert rep.certificate.max_scaled <= 50 * cfg.grad_tol


def test_certificate_stabilizes():
    mesh = build_interval_mesh(128)
    f = DiscreteFunction.interpolate(mesh, lambda x: np.sin(np.pi * x[:, 0]) ** 2)
    cfg = SolverConfig(p=3.0)
    rep = run_approximation(mesh, f, ApproximationSchedule((0.5, 1.0, 2.0)), cfg)
    last, prev = rep.stages[-1], rep.stages[-2]
    assert prev.data_l1_gap < cfg.grad_tol
    assert last.certificate.max_abs <= 2 * prev.certificate.max_abs + 1e-300


# -- estimates ------------------------------------------------------------------------


def test_apriori_examples(square, spike_solution):
    f, u = spike_solution
    zero = DiscreteFunction.zeros(square)
    assert apriori_estimate_check(square, zero, f, [0.1, 1.0], 1.5).worst_ratio == 0.0
    with pytest.raises(DegenerateInputError):
        apriori_estimate_check(square, u, zero, [1.0], 1.5)
    ks = apriori_k_grid(u)
    assert ks.size == 16
    chk = apriori_estimate_check(square, u, f, ks, 1.5)
    assert chk.worst_ratio <= 1.05


def test_truncated_energy_nested(spike_solution, square):
    _, u = spike_solution
    ks = np.geomspace(1e-3, 2 * u.max_abs(), 25)
    vals = [truncated_energy(square, u, k, 1.5) for k in ks]
    band = [band_energy(square, u, k, 1.5) for k in ks]
    assert np.all(np.diff(vals) >= 0) and np.all(np.diff(band) >= 0)


def test_decay_checks_on_bounded_and_affine():
    mesh = build_rectangle_mesh(12, 12)
    bounded = DiscreteFunction.interpolate(mesh, lambda x: x[:, 0] * (1 - x[:, 0]))
    assert u_decay_check(mesh, bounded, 2.5).status == "not applicable"
    affine = DiscreteFunction.interpolate(mesh, lambda x: 2 * x[:, 0] + x[:, 1])
    assert grad_decay_check(mesh, affine, 1.5).status == "no tail"


def test_fit_window_bounds():
    k = np.geomspace(1.0, 100.0, 11)
    assert FitWindow("max", 0.1, 0.5).bounds(k) == pytest.approx((10.0, 50.0))
    assert FitWindow().bounds(k) == pytest.approx((10 ** 0.8, 10 ** 1.8))
    with pytest.raises(ValueError):
        FitWindow("span", 0.5, 0.4)


def test_cauchy_in_measure(square, spike_solution):
    _, u = spike_solution
    pairs, table = cauchy_in_measure(square, [u, u, u], [0.1, 1.0])
    assert pairs == [(0, 1), (0, 2), (1, 2)] and np.all(table == 0)
    with pytest.raises(ValueError):
        cauchy_in_measure(square, [u], [0.1])


# -- pipeline -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def spike_report():
    mesh = build_rectangle_mesh(32, 32)
    return mesh, run_approximation(mesh, spike(mesh), ApproximationSchedule((2.0, 8.0, 32.0)),
                                   SolverConfig(p=1.5))


def test_pipeline_appends_limit_stage(spike_report):
    mesh, rep = spike_report
    assert [s.level for s in rep.stages] == [2.0, 8.0, 32.0, None]
    assert rep.stages[-1].data_l1_gap == 0.0
    assert all(s.outcome.converged for s in rep.stages)
    gaps = [s.data_l1_gap for s in rep.stages]
    assert all(b <= a for a, b in zip(gaps, gaps[1:]))


def test_truncations_converge():
    # levels approaching the spike height (1024 on this mesh) carry most of the mass
    mesh = build_rectangle_mesh(32, 32)
    rep = run_approximation(mesh, spike(mesh), ApproximationSchedule((64.0, 256.0, 768.0, 1000.0)),
                            SolverConfig(p=1.5))
    last = len(rep.stages) - 1
    gaps = np.array([rep.truncation_convergence[(i, last)] for i in range(last)])
    assert np.all(gaps[-1] <= 0.15 * gaps[0])
    # monotone in the level for the upper part of the k grid; small k can rise first
    upper = gaps[:, 2:]
    assert np.all(np.diff(upper, axis=0) <= 0)


def test_write_report(tmp_path, spike_report):
    _, rep = spike_report
    paths = write_report(rep, tmp_path)
    names = {p.name for p in paths}
    assert {"report.json", "stage_0_solution.csv", "stage_3_solution.csv", "u_tail_curve.csv"} <= names
    doc = json.loads((tmp_path / "report.json").read_text())
    assert len(doc["stages"]) == 4


def test_uniqueness_identical_schedules():
    mesh = build_rectangle_mesh(16, 16)
    sched = ApproximationSchedule((2.0, 8.0))
    rep = uniqueness_crosscheck(mesh, spike(mesh), sched, sched, SolverConfig(p=1.5))
    assert rep.relative_l1_gap <= 1e-8
    assert rep.linf_truncation_gap <= 1e-8


def test_tail_fit_on_synthetic_curve():
    from plap.entropy import _fit

    k = np.geomspace(0.01, 10.0, 64)
    fit = _fit(DistributionCurve(k, 0.5 * k ** -2.0), 2.0, FitWindow())
    assert fit.status == "ok"
    assert fit.exponent == pytest.approx(2.0, abs=1e-9) and fit.relative_error < 1e-9
