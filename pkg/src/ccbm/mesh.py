"""
Structured triangular meshes of a rectangle.

Meshes are immutable value objects: every operation returns a new
:class:`Mesh`. Vertex coordinates are stored in an ``(N, 2)`` array,
triangles as counter-clockwise index triples, and the boundary of the
rectangle as a closed counter-clockwise loop of edges starting at the
lower-left corner.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import GeometryMismatch, InvertedElement

Bounds = tuple[float, float, float, float]  # (xmin, xmax, ymin, ymax)

UNIT_SQUARE: Bounds = (-0.5, 0.5, -0.5, 0.5)

# signed area below this fraction of the pre-deformation area counts as inverted
AREA_FLOOR = 1e-3


class EmptyRegionWarning(UserWarning):
    pass


def _frozen(a, dtype=None) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# inclusion geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Disc:
    center: tuple[float, float]
    radius: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = np.asarray(pts) - np.asarray(self.center)
        return np.einsum("ij,ij->i", d, d) < self.radius**2

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        d = np.asarray(pts) - np.asarray(self.center)
        return np.hypot(d[:, 0], d[:, 1]) - self.radius

    def extent(self) -> Bounds:
        cx, cy = self.center
        r = self.radius
        return (cx - r, cx + r, cy - r, cy + r)

    @property
    def area(self) -> float:
        return float(np.pi * self.radius**2)


@dataclass(frozen=True)
class Square:
    """Axis-aligned square given by its center and half-width."""

    center: tuple[float, float]
    half_width: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = np.abs(np.asarray(pts) - np.asarray(self.center))
        return (d[:, 0] < self.half_width) & (d[:, 1] < self.half_width)

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        q = np.abs(np.asarray(pts) - np.asarray(self.center)) - self.half_width
        outside = np.hypot(np.maximum(q[:, 0], 0.0), np.maximum(q[:, 1], 0.0))
        inside = np.minimum(np.maximum(q[:, 0], q[:, 1]), 0.0)
        return outside + inside

    def extent(self) -> Bounds:
        cx, cy = self.center
        a = self.half_width
        return (cx - a, cx + a, cy - a, cy + a)

    @property
    def area(self) -> float:
        return float(4.0 * self.half_width**2)


Primitive = Union[Disc, Square]


@dataclass(frozen=True)
class InclusionSpec:
    """Contact region as a union of primitives, with reaction coefficient ``mu0``.

    Every primitive must lie strictly inside ``bounds`` and have positive size.
    """

    shapes: tuple[Primitive, ...]
    mu0: float = 10.0
    bounds: Bounds = UNIT_SQUARE

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        if not self.mu0 > 0:
            raise ValueError(f"mu0 must be positive, got {self.mu0}")
        if not self.shapes:
            raise ValueError("an inclusion needs at least one shape")
        xmin, xmax, ymin, ymax = self.bounds
        for s in self.shapes:
            size = s.radius if isinstance(s, Disc) else s.half_width
            if not size > 0:
                raise ValueError(f"{s} has non-positive size")
            ex = s.extent()
            if not (ex[0] > xmin and ex[1] < xmax and ex[2] > ymin and ex[3] < ymax):
                raise ValueError(f"{s} is not strictly inside the domain {self.bounds}")

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        out = np.zeros(len(pts), dtype=bool)
        for s in self.shapes:
            out |= s.contains(pts)
        return out

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        """Signed distance to the union (exact outside; exact inside for disjoint shapes)."""
        pts = np.atleast_2d(pts)
        return np.min([s.signed_distance(pts) for s in self.shapes], axis=0)

    def boundary_distance(self, pts: np.ndarray) -> np.ndarray:
        return np.abs(self.signed_distance(pts))

    @property
    def nominal_area(self) -> float:
        """Sum of primitive areas; equals the region area when shapes are disjoint."""
        return float(sum(s.area for s in self.shapes))


# ---------------------------------------------------------------------------
# mesh
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Interface:
    """Boundary of the marked region as oriented mesh edges.

    Edges are oriented so the region lies on their left; ``normals`` point
    out of the region.
    """

    edges: np.ndarray
    normals: np.ndarray
    lengths: np.ndarray
    nodes: np.ndarray

    def vertex_normals(self, n_vertices: int) -> np.ndarray:
        """Length-weighted average of adjacent edge normals, unit length, on ``nodes``."""
        acc = np.zeros((n_vertices, 2))
        w = self.normals * self.lengths[:, None]
        np.add.at(acc, self.edges[:, 0], w)
        np.add.at(acc, self.edges[:, 1], w)
        nv = acc[self.nodes]
        return nv / np.linalg.norm(nv, axis=1, keepdims=True)

    def loops(self) -> list[np.ndarray]:
        """Closed vertex loops (each in region-on-the-left order)."""
        nxt: dict[int, list[int]] = {}
        for a, b in self.edges:
            nxt.setdefault(int(a), []).append(int(b))
        remaining = {(int(a), int(b)) for a, b in self.edges}
        loops = []
        for a0, b0 in map(tuple, self.edges):
            if (a0, b0) not in remaining:
                continue
            loop = [a0]
            a, b = a0, b0
            while True:
                remaining.discard((a, b))
                if b == a0:
                    break
                loop.append(b)
                cands = [c for c in nxt[b] if (b, c) in remaining]
                a, b = b, cands[0]
            loops.append(np.array(loop))
        return loops


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    element_region: np.ndarray
    bounds: Bounds
    _spaces: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, float))
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64))
        object.__setattr__(self, "boundary_edges", _frozen(self.boundary_edges, np.int64))
        object.__setattr__(self, "element_region", _frozen(self.element_region, bool))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        return signed_areas(self.vertices, self.triangles)

    @cached_property
    def barycenters(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def boundary_normals(self) -> np.ndarray:
        p = self.vertices[self.boundary_edges]
        d = p[:, 1] - p[:, 0]
        n = np.column_stack([d[:, 1], -d[:, 0]])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        """Boundary vertices in loop order."""
        return self.boundary_edges[:, 0].copy()

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted, shape (E, 2) with e[0] < e[1]."""
        t = self.triangles
        e = np.concatenate([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def triangle_edges(self) -> np.ndarray:
        """Edge index of the edge opposite each local vertex, shape (M, 3)."""
        t = self.triangles
        n = self.n_vertices
        key = self.edges[:, 0] * n + self.edges[:, 1]
        local = []
        for a, b in ((1, 2), (2, 0), (0, 1)):
            lo = np.minimum(t[:, a], t[:, b])
            hi = np.maximum(t[:, a], t[:, b])
            local.append(np.searchsorted(key, lo * n + hi))
        return np.column_stack(local)

    @cached_property
    def vertex_neighbors(self) -> list[np.ndarray]:
        e = self.edges
        nbr: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for a, b in e:
            nbr[a].append(b)
            nbr[b].append(a)
        return [np.array(sorted(x), dtype=np.int64) for x in nbr]

    def interface(self) -> Interface:
        """Edges separating inside-tagged from outside-tagged triangles."""
        t = self.triangles
        reg = self.element_region
        directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        owner_in = np.tile(reg, 3)
        n = self.n_vertices
        inside_keys = directed[owner_in, 0] * n + directed[owner_in, 1]
        outside_keys = directed[~owner_in, 1] * n + directed[~owner_in, 0]
        mask = np.isin(inside_keys, outside_keys)
        edges = directed[owner_in][mask]
        p = self.vertices[edges]
        d = p[:, 1] - p[:, 0]
        lengths = np.linalg.norm(d, axis=1)
        normals = np.column_stack([d[:, 1], -d[:, 0]]) / lengths[:, None]
        nodes = np.unique(edges)
        return Interface(edges=edges, normals=normals, lengths=lengths, nodes=nodes)

    @cached_property
    def _locator(self):
        return cKDTree(self.barycenters)

    def locate(self, points: np.ndarray, k: int = 12):
        """Containing triangle and barycentric coordinates for each point.

        Returns ``(tri, lam)``; ``tri`` is -1 for points outside the mesh.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        k = min(k, self.n_triangles)
        _, cand = self._locator.query(points, k=k)
        cand = np.atleast_2d(cand).reshape(len(points), k)
        tri = np.full(len(points), -1, dtype=np.int64)
        lam = np.zeros((len(points), 3))
        for j in range(k):
            todo = tri < 0
            if not todo.any():
                break
            c = cand[todo, j]
            l = _barycentric(self.vertices[self.triangles[c]], points[todo])
            ok = np.all(l >= -1e-12, axis=1)
            idx = np.flatnonzero(todo)[ok]
            tri[idx] = c[ok]
            lam[idx] = l[ok]
        for i in np.flatnonzero(tri < 0):
            l = _barycentric(self.vertices[self.triangles], np.repeat(points[i:i + 1], self.n_triangles, 0))
            hit = np.flatnonzero(np.all(l >= -1e-12, axis=1))
            if len(hit):
                tri[i] = hit[0]
                lam[i] = l[hit[0]]
        return tri, lam

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return replace(self, vertices=vertices, _spaces={})

    def with_region(self, region: np.ndarray) -> "Mesh":
        return replace(self, element_region=region, _spaces={})


def signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = vertices[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _barycentric(tri_pts: np.ndarray, pts: np.ndarray) -> np.ndarray:
    a, b, c = tri_pts[:, 0], tri_pts[:, 1], tri_pts[:, 2]
    v0, v1, v2 = b - a, c - a, pts - a
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    l1 = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / det
    l2 = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def build_rect_mesh(nx: int, ny: int, bounds: Sequence[float] = UNIT_SQUARE) -> Mesh:
    """Structured criss-cross triangulation of a rectangle.

    Cell ``(i, j)`` is split along its SW-NE diagonal when ``i + j`` is even
    and along its SE-NW diagonal otherwise. For even ``nx`` and ``ny`` and
    centered bounds the mesh is invariant under ``x -> -x`` and ``y -> -y``.
    """
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ValueError(f"nx and ny must be positive integers, got {nx}, {ny}")
    xmin, xmax, ymin, ymax = map(float, bounds)
    if not (xmax > xmin and ymax > ymin):
        raise ValueError(f"degenerate bounds {bounds}")
    nx, ny = int(nx), int(ny)
    xs = np.linspace(xmin, xmax, nx + 1)
    ys = np.linspace(ymin, ymax, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    a = j * (nx + 1) + i
    b = a + 1
    c = b + nx + 1
    d = a + nx + 1
    even = (i + j) % 2 == 0
    t1 = np.where(even[:, None], np.column_stack([a, b, c]), np.column_stack([a, b, d]))
    t2 = np.where(even[:, None], np.column_stack([a, c, d]), np.column_stack([b, c, d]))
    tris = np.empty((2 * nx * ny, 3), dtype=np.int64)
    tris[0::2] = t1
    tris[1::2] = t2

    def idx(ii, jj):
        return jj * (nx + 1) + ii

    loop = np.concatenate([
        idx(np.arange(nx + 1), 0),
        idx(nx, np.arange(1, ny + 1)),
        idx(np.arange(nx - 1, -1, -1), ny),
        idx(0, np.arange(ny - 1, 0, -1)),
    ])
    bedges = np.column_stack([loop, np.roll(loop, -1)])
    return Mesh(verts, tris, bedges, np.zeros(len(tris), dtype=bool), (xmin, xmax, ymin, ymax))


def mark_region(mesh: Mesh, spec: InclusionSpec | None) -> Mesh:
    """Tag triangles whose barycenter lies in the inclusion."""
    if spec is None:
        return mesh.with_region(np.zeros(mesh.n_triangles, dtype=bool))
    if tuple(spec.bounds) != tuple(mesh.bounds):
        raise GeometryMismatch(f"inclusion bounds {spec.bounds} differ from mesh bounds {mesh.bounds}")
    region = spec.contains(mesh.barycenters)
    if not region.any():
        warnings.warn("inclusion covers no triangle barycenter; region is empty",
                      EmptyRegionWarning, stacklevel=2)
    return mesh.with_region(region)


def region_area(mesh: Mesh) -> float:
    return float(mesh.signed_areas[mesh.element_region].sum())


def deform_mesh(mesh: Mesh, theta: np.ndarray, t: float, floor: float = AREA_FLOOR) -> Mesh:
    """Move every vertex ``x -> x + t*theta(x)``.

    Raises :class:`InvertedElement` when a signed area drops to ``floor``
    times its previous value or below.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != mesh.vertices.shape:
        raise ValueError(f"theta has shape {theta.shape}, expected {mesh.vertices.shape}")
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0 or not theta.any():
        return mesh
    new = mesh.vertices + t * theta
    area = signed_areas(new, mesh.triangles)
    bad = area <= floor * mesh.signed_areas
    if bad.any():
        raise InvertedElement(f"{int(bad.sum())} triangle(s) inverted or degenerate at t={t:g}")
    return mesh.with_vertices(new)


def triangle_quality(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Ratio ``2 * inradius / circumradius`` per triangle (1 for equilateral)."""
    p = vertices[triangles]
    la = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    lb = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    lc = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    area = signed_areas(vertices, triangles)
    return 16.0 * area**2 / ((la + lb + lc) * la * lb * lc)


def min_triangle_quality(mesh: Mesh) -> float:
    return float(triangle_quality(mesh.vertices, mesh.triangles).min())


# ---------------------------------------------------------------------------
# plain-text and VTK I/O
# ---------------------------------------------------------------------------

def write_mesh(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"vertices {mesh.n_vertices} triangles {mesh.n_triangles}\n")
        for x, y in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"{a} {b} {c}\n")


def read_mesh(path) -> Mesh:
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 4 or head[0] != "vertices" or head[2] != "triangles":
            raise ValueError(f"{path}: bad header {' '.join(head)!r}")
        nv, nt = int(head[1]), int(head[3])
        rows = fh.read().split("\n")
    verts = np.array([r.split() for r in rows[:nv]], dtype=float)
    tris = np.array([r.split() for r in rows[nv:nv + nt]], dtype=np.int64)
    if len(verts) != nv or len(tris) != nt:
        raise ValueError(f"{path}: truncated file")
    bounds = (verts[:, 0].min(), verts[:, 0].max(), verts[:, 1].min(), verts[:, 1].max())
    return Mesh(verts, tris, boundary_loop(verts, tris), np.zeros(nt, dtype=bool), bounds)


def boundary_loop(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Outer boundary as a CCW edge loop starting at the lower-left-most vertex."""
    directed = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    n = len(vertices)
    keys = directed[:, 0] * n + directed[:, 1]
    rev = directed[:, 1] * n + directed[:, 0]
    bd = directed[~np.isin(keys, rev)]
    nxt = dict(zip(bd[:, 0].tolist(), bd[:, 1].tolist()))
    bverts = bd[:, 0]
    start = bverts[np.lexsort((vertices[bverts, 0], vertices[bverts, 1]))[0]]
    loop = [int(start)]
    while True:
        b = nxt[loop[-1]]
        if b == loop[0]:
            break
        loop.append(b)
    if len(loop) != len(bd):
        raise ValueError("boundary is not a single closed loop")
    loop = np.array(loop)
    return np.column_stack([loop, np.roll(loop, -1)])


def write_vtk(mesh: Mesh, path, point_data: dict | None = None, cell_data: dict | None = None,
              points: np.ndarray | None = None) -> None:
    """Legacy-VTK unstructured grid. ``points`` overrides vertex coordinates (e.g. P2 nodes)."""
    pts = mesh.vertices if points is None else points
    lines = ["# vtk DataFile Version 3.0", "ccbm mesh", "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(pts)} double"]
    lines += [f"{float(x)!r} {float(y)!r} 0.0" for x, y in pts]
    lines.append(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {mesh.n_triangles}")
    lines += ["5"] * mesh.n_triangles
    cell_data = dict(cell_data or {})
    cell_data.setdefault("region", mesh.element_region.astype(int))
    lines.append(f"CELL_DATA {mesh.n_triangles}")
    for name, vals in cell_data.items():
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [repr(float(v)) for v in vals]
    if point_data:
        lines.append(f"POINT_DATA {len(pts)}")
        for name, vals in point_data.items():
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [repr(float(v)) for v in np.asarray(vals)[:len(pts)]]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
