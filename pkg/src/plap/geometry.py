"""Simplicial meshes of compact Riemannian manifolds.

A :class:`Mesh` carries the piecewise-flat metric of its embedded cells: each
simplex inherits the metric of the ambient Euclidean space (or of the flat
torus when a period is attached), so the volume element is absorbed into the
per-cell ``metric_volume``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

SPHERE_SUBDIVISION_CAP = 8
HEADER_PREFIX = "PLAPMESH v1"


class MeshError(ValueError):
    """Invalid mesh construction arguments or violated mesh invariants."""


class MeshFormatError(MeshError):
    """Malformed mesh file; ``line`` is 1-based (0 when the file is empty)."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass(frozen=True, eq=False)
class Mesh:
    """Simplicial mesh with per-cell Riemannian volumes.

    Parameters
    ----------
    vertices : ndarray, shape (n_vertices, ambient_dim)
        Node positions in embedding coordinates.
    cells : ndarray of int, shape (n_cells, dimension + 1)
        Vertex indices of each simplex.
    boundary_nodes : ndarray of int
        Sorted indices of nodes on the manifold boundary (empty when closed).
    closed : bool
        True for manifolds without boundary.
    period : tuple of float, optional
        Box lengths of a flat torus; edge vectors are unwrapped to the
        minimum image so that cells straddling the seam stay small.

    Use :meth:`from_arrays` (or a ``build_*`` function) rather than the raw
    constructor; it computes ``metric_volume`` and checks the invariants.
    """

    vertices: np.ndarray
    cells: np.ndarray
    metric_volume: np.ndarray
    boundary_nodes: np.ndarray
    closed: bool
    period: tuple[float, ...] | None = None

    @classmethod
    def from_arrays(cls, vertices, cells, *, closed: bool, boundary_nodes=None,
                    period=None) -> "Mesh":
        vertices = np.asarray(vertices, dtype=float)
        if vertices.ndim == 1:
            vertices = vertices[:, None]
        cells = np.asarray(cells, dtype=np.int64)
        if cells.ndim != 2 or cells.shape[1] not in (2, 3):
            raise MeshError("cells must be segments (2 indices) or triangles (3 indices)")
        n_vertices = vertices.shape[0]
        if cells.size and (cells.min() < 0 or cells.max() >= n_vertices):
            raise MeshError("cell vertex index out of range")
        if not np.all(np.isfinite(vertices)):
            raise MeshError("vertex coordinates must be finite")
        dim = cells.shape[1] - 1
        if vertices.shape[1] < dim:
            raise MeshError(f"{dim}-dimensional cells need at least {dim} coordinates")
        if period is not None:
            period = tuple(float(x) for x in period)
            if len(period) != vertices.shape[1] or min(period) <= 0:
                raise MeshError("period must give one positive length per coordinate")

        edges = _edge_vectors(vertices, cells, period)
        gram = np.einsum("cdi,cdj->cij", edges, edges)
        volume = np.sqrt(np.clip(np.linalg.det(gram), 0.0, None)) / math.factorial(dim)
        scale = np.einsum("cdi,cdi->ci", edges, edges).prod(axis=1) ** 0.5
        degenerate = ~(volume > 1e-12 * scale / math.factorial(dim))
        if np.any(degenerate):
            raise MeshError(f"degenerate cell {int(np.flatnonzero(degenerate)[0])}")

        if boundary_nodes is None:
            boundary_nodes = [] if closed else _boundary_from_facets(cells)
        boundary_nodes = np.unique(np.asarray(boundary_nodes, dtype=np.int64))
        if boundary_nodes.size and (boundary_nodes.min() < 0 or boundary_nodes.max() >= n_vertices):
            raise MeshError("boundary node index out of range")
        if closed and boundary_nodes.size:
            raise MeshError("a closed mesh cannot have boundary nodes")
        if not closed and not boundary_nodes.size:
            raise MeshError("a mesh with boundary needs at least one boundary node")

        mesh = cls(vertices, cells, volume, boundary_nodes, bool(closed), period)
        mesh._check_connected()
        for arr in (mesh.vertices, mesh.cells, mesh.metric_volume, mesh.boundary_nodes):
            arr.setflags(write=False)
        return mesh

    def _check_connected(self):
        n = self.n_vertices
        if np.setdiff1d(np.arange(n), self.cells).size:
            raise MeshError("every vertex must belong to a cell")
        rows = np.repeat(self.cells[:, :1], self.cells.shape[1] - 1, axis=1).ravel()
        cols = self.cells[:, 1:].ravel()
        graph = sparse.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
        n_comp, _ = connected_components(graph, directed=False)
        if n_comp != 1:
            raise MeshError(f"mesh has {n_comp} connected components")

    # -- basic sizes -------------------------------------------------------

    @property
    def dimension(self) -> int:
        return self.cells.shape[1] - 1

    @property
    def ambient_dimension(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def total_volume(self) -> float:
        return math.fsum(self.metric_volume)

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha1()
        for arr in (self.vertices, self.cells, self.boundary_nodes):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr((self.closed, self.period)).encode())
        return h.hexdigest()

    # -- P1 machinery --------------------------------------------------------

    @cached_property
    def cell_gradient_basis(self) -> np.ndarray:
        """Gradients of the barycentric hat functions, shape (cells, ambient, dim+1).

        Vectors are tangent to each cell and expressed in ambient coordinates.
        """
        edges = _edge_vectors(self.vertices, self.cells, self.period)
        gram_inv = np.linalg.inv(np.einsum("cdi,cdj->cij", edges, edges))
        n = self.dimension
        d = np.hstack([-np.ones((n, 1)), np.eye(n)])
        return np.einsum("cdi,cij,jk->cdk", edges, gram_inv, d)

    @cached_property
    def gradient_operator(self) -> sparse.csr_matrix:
        """Sparse map from nodal values to stacked cell gradients (cells*ambient, nodes)."""
        basis = self.cell_gradient_basis
        m, amb, k = basis.shape
        rows = np.repeat(np.arange(m * amb), k)
        cols = np.repeat(self.cells[:, None, :], amb, axis=1).ravel()
        return sparse.csr_matrix((basis.ravel(), (rows, cols)), shape=(m * amb, self.n_vertices))

    @cached_property
    def lumped_mass(self) -> np.ndarray:
        """Vertex-quadrature weights: each cell hands vol/(dim+1) to its vertices."""
        share = np.repeat(self.metric_volume / (self.dimension + 1), self.dimension + 1)
        return np.bincount(self.cells.ravel(), weights=share, minlength=self.n_vertices)

    def cell_values(self, nodal: np.ndarray) -> np.ndarray:
        """Nodal values gathered per cell, shape (cells, dim+1)."""
        return np.asarray(nodal)[self.cells]

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return (self.closed == other.closed and self.period == other.period
                and np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.cells, other.cells)
                and np.array_equal(self.boundary_nodes, other.boundary_nodes))

    __hash__ = object.__hash__


def _edge_vectors(vertices, cells, period):
    # (cells, ambient, dim)
    base = vertices[cells[:, :1]]
    edges = vertices[cells[:, 1:]] - base
    if period is not None:
        p = np.asarray(period)
        edges = edges - p * np.round(edges / p)
    return np.transpose(edges, (0, 2, 1))


def _boundary_from_facets(cells):
    k = cells.shape[1]
    facets = np.sort(np.concatenate([np.delete(cells, j, axis=1) for j in range(k)]), axis=1)
    uniq, counts = np.unique(facets, axis=0, return_counts=True)
    return np.unique(uniq[counts == 1])


# -- quadrature ---------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric quadrature on the reference simplex; weights sum to 1."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")
        if not math.isclose(float(np.sum(self.weights)), 1.0, rel_tol=1e-12):
            raise ValueError("quadrature weights must sum to 1")

    @classmethod
    def midpoint(cls, dim: int) -> "QuadratureRule":
        return cls(np.full((1, dim + 1), 1.0 / (dim + 1)), np.ones(1))

    @classmethod
    def vertex(cls, dim: int) -> "QuadratureRule":
        return cls(np.eye(dim + 1), np.full(dim + 1, 1.0 / (dim + 1)))

    @classmethod
    def three_point(cls) -> "QuadratureRule":
        """Degree-2 edge-free rule on triangles."""
        pts = np.full((3, 3), 1.0 / 6.0) + np.eye(3) * 0.5
        return cls(pts, np.full(3, 1.0 / 3.0))

    @classmethod
    def gauss(cls, dim: int, n: int = 8) -> "QuadratureRule":
        """Gauss-Legendre on segments, collapsed (Duffy) tensor rule on triangles."""
        x, w = np.polynomial.legendre.leggauss(n)
        x, w = 0.5 * (x + 1.0), 0.5 * w
        if dim == 1:
            return cls(np.column_stack([1.0 - x, x]), w)
        s, t = np.meshgrid(x, x, indexing="ij")
        ws = np.outer(w, w) * (1.0 - s)
        a, b = s.ravel(), (t * (1.0 - s)).ravel()
        return cls(np.column_stack([1.0 - a - b, a, b]), 2.0 * ws.ravel())


def integrate(mesh: Mesh, values) -> float:
    """Sum of ``value * metric_volume`` over cells, exactly rounded (order independent)."""
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.n_cells,):
        raise ValueError(f"expected {mesh.n_cells} cell values, got shape {values.shape}")
    return math.fsum(values * mesh.metric_volume)


# -- builders -------------------------------------------------------------------


def build_interval_mesh(n_cells: int, length: float = 1.0) -> Mesh:
    if int(n_cells) != n_cells or n_cells < 2:
        raise MeshError("n_cells must be an integer >= 2")
    if not length > 0:
        raise MeshError("length must be positive")
    n = int(n_cells)
    x = np.linspace(0.0, float(length), n + 1)
    cells = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    return Mesh.from_arrays(x[:, None], cells, closed=False, boundary_nodes=[0, n])


def _grid_triangles(nx, ny, index):
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    i, j = i.ravel(), j.ravel()
    a, b = index(i, j), index(i + 1, j)
    c, d = index(i + 1, j + 1), index(i, j + 1)
    return np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])


def build_flat_torus_mesh(nx: int, ny: int, lx: float = 1.0, ly: float = 1.0) -> Mesh:
    if nx < 3 or ny < 3:
        raise MeshError("torus needs at least 3 cells per direction")
    if not (lx > 0 and ly > 0):
        raise MeshError("torus side lengths must be positive")
    xs, ys = np.meshgrid(np.arange(nx) * (lx / nx), np.arange(ny) * (ly / ny), indexing="ij")
    verts = np.column_stack([xs.ravel(), ys.ravel()])
    cells = _grid_triangles(nx, ny, lambda i, j: (i % nx) * ny + (j % ny))
    return Mesh.from_arrays(verts, cells, closed=True, period=(lx, ly))


def build_rectangle_mesh(nx: int, ny: int, lx: float = 1.0, ly: float = 1.0) -> Mesh:
    """Right-triangle grid of [0, lx] x [0, ly]; boundary is the rectangle's edge."""
    if nx < 1 or ny < 1:
        raise MeshError("rectangle needs at least one cell per direction")
    if not (lx > 0 and ly > 0):
        raise MeshError("rectangle side lengths must be positive")
    xs, ys = np.meshgrid(np.linspace(0, lx, nx + 1), np.linspace(0, ly, ny + 1), indexing="ij")
    verts = np.column_stack([xs.ravel(), ys.ravel()])
    cells = _grid_triangles(nx, ny, lambda i, j: i * (ny + 1) + j)
    ii, jj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="ij")
    on_edge = (ii == 0) | (ii == nx) | (jj == 0) | (jj == ny)
    return Mesh.from_arrays(verts, cells, closed=False, boundary_nodes=np.flatnonzero(on_edge.ravel()))


def _icosahedron():
    t = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def _subdivide(verts, faces):
    edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    uniq, inverse = np.unique(edges, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    mids = 0.5 * (verts[uniq[:, 0]] + verts[uniq[:, 1]])
    mids /= np.linalg.norm(mids, axis=1, keepdims=True)
    n_f = faces.shape[0]
    m01, m12, m20 = (len(verts) + inverse[k * n_f:(k + 1) * n_f] for k in range(3))
    a, b, c = faces.T
    new_faces = np.concatenate([
        np.column_stack([a, m01, m20]), np.column_stack([b, m12, m01]),
        np.column_stack([c, m20, m12]), np.column_stack([m01, m12, m20]),
    ])
    return np.vstack([verts, mids]), new_faces


def build_triangulated_sphere(subdivisions: int = 3, radius: float = 1.0) -> Mesh:
    """Icosphere with ``20 * 4**subdivisions`` flat triangles inscribed in the sphere."""
    if int(subdivisions) != subdivisions or not 0 <= subdivisions <= SPHERE_SUBDIVISION_CAP:
        raise MeshError(f"subdivisions must be an integer in [0, {SPHERE_SUBDIVISION_CAP}]")
    if not radius > 0:
        raise MeshError("radius must be positive")
    verts, faces = _icosahedron()
    for _ in range(int(subdivisions)):
        verts, faces = _subdivide(verts, faces)
    return Mesh.from_arrays(verts * radius, faces, closed=True)


# -- file format ------------------------------------------------------------------


def save_mesh(mesh: Mesh, path) -> None:
    lines = [f"{HEADER_PREFIX} dim={mesh.dimension} closed={int(mesh.closed)}",
             f"{mesh.n_vertices} {mesh.n_cells}"]
    lines += [" ".join(_fmt(x) for x in row) for row in mesh.vertices]
    lines += [" ".join(str(int(i)) for i in row) for row in mesh.cells]
    if mesh.boundary_nodes.size:
        lines.append("boundary " + " ".join(str(int(i)) for i in mesh.boundary_nodes))
    if mesh.period is not None:
        lines.append("period " + " ".join(_fmt(x) for x in mesh.period))
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    raw = Path(path).read_text().splitlines()
    while raw and not raw[-1].strip():
        raw.pop()
    if not raw or not raw[0].strip():
        raise MeshFormatError(0, "missing header")
    head = raw[0].split()
    if " ".join(head[:2]) != HEADER_PREFIX or len(head) != 4:
        raise MeshFormatError(1, f"malformed header, expected '{HEADER_PREFIX} dim=<N> closed=<0|1>'")
    try:
        opts = dict(tok.split("=", 1) for tok in head[2:])
        dim, closed = int(opts["dim"]), int(opts["closed"])
    except (ValueError, KeyError):
        raise MeshFormatError(1, "malformed header fields") from None
    if dim not in (1, 2) or closed not in (0, 1):
        raise MeshFormatError(1, "dim must be 1 or 2 and closed 0 or 1")
    if len(raw) < 2:
        raise MeshFormatError(2, "missing size line")
    try:
        n_v, n_c = (int(x) for x in raw[1].split())
    except ValueError:
        raise MeshFormatError(2, "size line must hold '<n_vertices> <n_cells>'") from None
    if n_v <= 0 or n_c <= 0:
        raise MeshFormatError(2, "vertex and cell counts must be positive")
    if len(raw) < 2 + n_v + n_c:
        raise MeshFormatError(len(raw) + 1, "unexpected end of file")

    verts = []
    for ln in range(2, 2 + n_v):
        try:
            verts.append([float(x) for x in raw[ln].split()])
        except ValueError:
            raise MeshFormatError(ln + 1, "vertex coordinates must be decimals") from None
        if len(verts[-1]) != len(verts[0]) or len(verts[-1]) < dim:
            raise MeshFormatError(ln + 1, "inconsistent vertex coordinate count")
    cells = []
    for ln in range(2 + n_v, 2 + n_v + n_c):
        try:
            row = [int(x) for x in raw[ln].split()]
        except ValueError:
            raise MeshFormatError(ln + 1, "cell indices must be integers") from None
        if len(row) != dim + 1:
            raise MeshFormatError(ln + 1, f"cell must list {dim + 1} vertex indices")
        if min(row) < 0 or max(row) >= n_v:
            raise MeshFormatError(ln + 1, "index out of range")
        if len(set(row)) != len(row):
            raise MeshFormatError(ln + 1, "degenerate cell (repeated vertex)")
        cells.append(row)

    boundary, period = None, None
    for ln in range(2 + n_v + n_c, len(raw)):
        tok = raw[ln].split()
        if not tok:
            continue
        try:
            if tok[0] == "boundary" and boundary is None:
                boundary = [int(x) for x in tok[1:]]
                if any(i < 0 or i >= n_v for i in boundary):
                    raise MeshFormatError(ln + 1, "index out of range")
            elif tok[0] == "period" and period is None:
                period = [float(x) for x in tok[1:]]
            else:
                raise MeshFormatError(ln + 1, f"unexpected trailing line '{tok[0]}'")
        except ValueError as exc:
            if isinstance(exc, MeshFormatError):
                raise
            raise MeshFormatError(ln + 1, f"malformed {tok[0]} line") from None

    try:
        return Mesh.from_arrays(np.array(verts), np.array(cells), closed=bool(closed),
                                boundary_nodes=boundary, period=period)
    except MeshError as exc:
        if isinstance(exc, MeshFormatError):
            raise
        line = 0
        msg = str(exc)
        if msg.startswith("degenerate cell "):
            line = 2 + n_v + int(msg.split()[-1]) + 1
        raise MeshFormatError(line, msg) from None
