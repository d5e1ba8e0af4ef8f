"""Named data and closed-form reference solutions for the built-in benchmarks."""

from __future__ import annotations

import numpy as np

from .fields import DiscreteFunction, load_function_csv
from .geometry import Mesh


def spike(mesh: Mesh, where="center") -> DiscreteFunction:
    """Approximate Dirac: unit lumped mass concentrated at one vertex.

    ``where`` is a vertex index or ``"center"`` (the vertex nearest the
    centre of the bounding box). The nodal value is 1/m_i with m_i the lumped
    mass of the vertex, so the discrete integral is exactly 1.
    """
    if where == "center":
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        d = np.linalg.norm(mesh.vertices - 0.5 * (lo + hi), axis=1)
        cand = np.setdiff1d(np.arange(mesh.n_vertices), mesh.boundary_nodes)
        idx = int(cand[np.argmin(d[cand])])
    else:
        idx = int(where)
        if not 0 <= idx < mesh.n_vertices:
            raise ValueError(f"spike vertex {idx} out of range")
    vals = np.zeros(mesh.n_vertices)
    vals[idx] = 1.0 / mesh.lumped_mass[idx]
    return DiscreteFunction(mesh, vals)


def sine(mesh: Mesh, frequency: float) -> DiscreteFunction:
    """sin(2 pi w s), s the first embedding coordinate rescaled to [0, 1]."""
    x = mesh.vertices[:, 0]
    s = (x - x.min()) / max(np.ptp(x), 1e-300)
    return DiscreteFunction(mesh, np.sin(2 * np.pi * frequency * s))


def named_datum(mesh: Mesh, spec: str, base_dir=None) -> DiscreteFunction:
    """Parse ``constant:<c>``, ``spike:<vertex|center>``, ``sin:<frequency>``, ``file:<path>``."""
    kind, _, arg = spec.partition(":")
    if kind == "constant":
        return DiscreteFunction(mesh, np.full(mesh.n_vertices, float(arg)))
    if kind == "spike":
        return spike(mesh, arg or "center")
    if kind == "sin":
        return sine(mesh, float(arg))
    if kind == "file":
        from pathlib import Path

        path = Path(arg)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return load_function_csv(mesh, path)
    raise ValueError(f"unknown datum '{spec}'")


def interval_constant_solution(x, p: float, length: float = 1.0, c: float = 1.0):
    """Exact solution of -(|u'|^(p-2) u')' = c on [0, L] with zero end values."""
    pp = p / (p - 1)
    a = c ** (1.0 / (p - 1))
    half = length / 2
    return a * (half ** pp - np.abs(np.asarray(x) - half) ** pp) / pp


def sampled_linf_error(mesh: Mesh, u: DiscreteFunction, exact, samples_per_cell: int = 16) -> float:
    """max |u_h - u| over equispaced points in every cell of a 1D mesh.

    Sampling inside cells matters: for p = 2 the P1 solution is nodally exact
    in 1D, so nodal errors would hide the interpolation error.
    """
    if mesh.dimension != 1:
        raise ValueError("sampled error is implemented for 1D meshes")
    t = np.linspace(0.0, 1.0, samples_per_cell + 1)
    cells = mesh.cells
    x0 = mesh.vertices[cells[:, 0], 0][:, None]
    x1 = mesh.vertices[cells[:, 1], 0][:, None]
    xs = x0 + t * (x1 - x0)
    uh = u.values[cells[:, 0]][:, None] * (1 - t) + u.values[cells[:, 1]][:, None] * t
    return float(np.max(np.abs(uh - exact(xs))))


def fitted_order(h, errors) -> float:
    """Least-squares slope of log(error) against log(h)."""
    slope, _ = np.polyfit(np.log(np.asarray(h, dtype=float)), np.log(np.asarray(errors, dtype=float)), 1)
    return float(slope)


def interval_refinement_study(p: float, n_values, config, samples_per_cell: int = 16):
    """Solve -Delta_p u = 1 on [0, 1] for each n; returns (rows, fitted order).

    ``rows`` holds (n, h, sampled L-infinity error, max nodal error, converged).
    """
    from dataclasses import replace

    from .geometry import build_interval_mesh
    from .solver import solve_weak

    cfg = replace(config, p=p)
    rows = []
    for n in n_values:
        mesh = build_interval_mesh(int(n), 1.0)
        f = DiscreteFunction(mesh, np.ones(mesh.n_vertices))
        out = solve_weak(mesh, f, cfg)

        def exact(x):
            return interval_constant_solution(x, p)

        nodal = float(np.max(np.abs(out.solution.values - exact(mesh.vertices[:, 0]))))
        err = sampled_linf_error(mesh, out.solution, exact, samples_per_cell)
        rows.append((int(n), 1.0 / n, err, nodal, out.converged))
    order = fitted_order([r[1] for r in rows], [r[2] for r in rows])
    return rows, order
