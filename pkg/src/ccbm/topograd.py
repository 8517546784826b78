"""
One-shot topological detection: the gradient field, its negative local
minima, their basins and a heuristic center/size estimate.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .assembly import ComplexField, fe_space, solve_state, solve_topo_adjoint, assemble_ccbm
from .errors import MeshMismatch, NoMinima, NoNegativeMinimum
from .mesh import Mesh
from .render import SvgCanvas, contour_segments

RING_DEPTH = 2
N_LEVELS = 30
MIN_PERSISTENCE = 0.05
# radius_estimate = R_CAL * |deepest minimum| / (max - min); the centered
# r = 0.1 disc reports about 0.08 at mu0 = 10 and 0.1 at high contrast
R_CAL = 0.1
ZERO_TOL = 1e-12


@dataclass
class TopoField:
    values: np.ndarray
    mesh: Mesh
    degree: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if len(self.values) != fe_space(self.mesh, self.degree).n_dofs:
            raise MeshMismatch("field length does not match the mesh")

    @property
    def nodal(self) -> np.ndarray:
        """Values at mesh vertices (P2 spaces list vertices first)."""
        return self.values[: self.mesh.n_vertices]

    @property
    def global_min(self) -> tuple[int, float]:
        k = int(np.argmin(self.nodal))
        return k, float(self.nodal[k])

    @property
    def argmin_point(self) -> np.ndarray:
        return self.mesh.vertices[self.global_min[0]].copy()


@dataclass
class Minimum:
    node: int
    value: float
    point: np.ndarray
    basin: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


@dataclass
class DetectionResult:
    minima: list[Minimum]
    center_estimate: np.ndarray
    radius_estimate: float
    iso_levels: np.ndarray
    field: TopoField | None = None
    state: ComplexField | None = None
    adjoint: ComplexField | None = None

    def to_dict(self) -> dict:
        k, val = self.field.global_min if self.field is not None else (None, None)
        return {
            "center": [float(c) for c in self.center_estimate],
            "radius": float(self.radius_estimate),
            "minima": [{"node": m.node, "value": m.value, "x": float(m.point[0]), "y": float(m.point[1]),
                        "basin_size": int(len(m.basin))} for m in self.minima],
            "global_min": None if k is None else {"node": k, "value": val,
                                                  "x": float(self.field.mesh.vertices[k, 0]),
                                                  "y": float(self.field.mesh.vertices[k, 1])},
            "levels": [float(v) for v in self.iso_levels],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        X = self.field.mesh.vertices
        basin_of = np.full(len(X), -1)
        for i, m in enumerate(self.minima):
            basin_of[m.basin] = i
        with open(path, "w") as fh:
            fh.write("node,x,y,dJ,basin\n")
            for k, ((x, y), d, b) in enumerate(zip(X, self.field.nodal, basin_of)):
                fh.write(f"{k},{float(x)!r},{float(y)!r},{float(d)!r},{b}\n")

    def write_svg(self, path, truth=None) -> None:
        render_detection(self, path, truth=truth)


# ---------------------------------------------------------------------------
# field
# ---------------------------------------------------------------------------

def topo_gradient_field(u: ComplexField, v: ComplexField, mesh: Mesh | None = None) -> TopoField:
    """``dJ = u_i v_r - u_r v_i`` node by node."""
    if u.degree != v.degree or len(u) != len(v):
        raise MeshMismatch("state and adjoint live on different spaces")
    if u.mesh is not None and v.mesh is not None and u.mesh is not v.mesh:
        raise MeshMismatch("state and adjoint live on different meshes")
    mesh = mesh or u.mesh or v.mesh
    if mesh is None:
        raise MeshMismatch("no mesh attached to the fields")
    return TopoField(u.im * v.re - u.re * v.im, mesh, u.degree)


# ---------------------------------------------------------------------------
# minima
# ---------------------------------------------------------------------------

def _adjacency(mesh: Mesh) -> sp.csr_matrix:
    e = mesh.edges
    n = mesh.n_vertices
    A = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    return (A + A.T).tocsr()


def _rings(nbrs, start: int, depth: int) -> list[np.ndarray]:
    seen = {start}
    frontier = [start]
    rings = []
    for _ in range(depth):
        nxt = []
        for a in frontier:
            for b in nbrs[a]:
                if b not in seen:
                    seen.add(b)
                    nxt.append(b)
        rings.append(np.asarray(nxt, dtype=int))
        frontier = nxt
    return rings


def ring_minima(values: np.ndarray, mesh: Mesh, ring_depth: int = RING_DEPTH,
                exclude_boundary: bool = True) -> np.ndarray:
    """Nodes passing the ring test.

    A node qualifies if its value is negative, it is strictly below every node
    within ``ring_depth`` hops, and the minimum over each hop ring increases
    strictly from one ring to the next.
    """
    if ring_depth < 1:
        raise ValueError("ring_depth must be >= 1")
    values = np.asarray(values, dtype=float)
    A = _adjacency(mesh)
    # cheap prefilter: strict minimum of the 1-ring
    nb_min = np.full(len(values), np.inf)
    rows = np.repeat(np.arange(A.shape[0]), np.diff(A.indptr))
    np.minimum.at(nb_min, rows, values[A.indices])
    cand = np.flatnonzero((values < 0) & (values < nb_min))
    if exclude_boundary:
        cand = np.setdiff1d(cand, mesh.boundary_vertices)
    nbrs = mesh.vertex_neighbors
    out = []
    for c in cand:
        prev = values[c]
        ok = True
        for ring in _rings(nbrs, int(c), ring_depth):
            if len(ring) == 0:
                break
            m = values[ring].min()
            if not m > prev:
                ok = False
                break
            prev = m
        if ok:
            out.append(int(c))
    return np.asarray(out, dtype=int)


def _find(parent: np.ndarray, a: int) -> int:
    root = a
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        parent[a], a = root, parent[a]
    return root


def merge_by_persistence(values: np.ndarray, mesh: Mesh, candidates: np.ndarray,
                         min_persistence: float = MIN_PERSISTENCE) -> np.ndarray:
    """Union-find sweep over the negative sublevel sets.

    Nodes are activated in increasing order of value and joined to activated
    neighbors. When two components that each hold a candidate meet, the
    shallower candidate dies if its depth below the meeting level is smaller
    than ``min_persistence * |global min|``.
    """
    values = np.asarray(values, dtype=float)
    if len(candidates) <= 1:
        return np.asarray(candidates, dtype=int)
    gmin = values.min()
    tol = min_persistence * abs(gmin)
    n = len(values)
    parent = np.arange(n)
    active = np.zeros(n, dtype=bool)
    owner = np.full(n, -1)          # deepest live candidate of a root
    is_cand = np.zeros(n, dtype=bool)
    is_cand[candidates] = True
    alive = set(int(c) for c in candidates)
    nbrs = mesh.vertex_neighbors
    for a in np.argsort(values, kind="stable"):
        h = values[a]
        if h >= 0:
            break
        active[a] = True
        owner[a] = a if is_cand[a] else -1
        for b in nbrs[a]:
            if not active[b]:
                continue
            ra, rb = _find(parent, a), _find(parent, int(b))
            if ra == rb:
                continue
            ca, cb = owner[ra], owner[rb]
            if ca >= 0 and cb >= 0:
                young, old = (ca, cb) if values[ca] > values[cb] else (cb, ca)
                if h - values[young] < tol:
                    alive.discard(int(young))
                keep = old
            else:
                keep = ca if ca >= 0 else cb
            parent[ra] = rb
            owner[rb] = keep
    return np.asarray(sorted(alive, key=lambda c: values[c]), dtype=int)


def find_local_minima(field_: TopoField, ring_depth: int = RING_DEPTH,
                      min_persistence: float = MIN_PERSISTENCE,
                      exclude_boundary: bool = True) -> list[Minimum]:
    """Negative, ring-convex local minima that survive the persistence merge, deepest first."""
    vals = field_.nodal
    cand = ring_minima(vals, field_.mesh, ring_depth, exclude_boundary)
    keep = merge_by_persistence(vals, field_.mesh, cand, min_persistence)
    X = field_.mesh.vertices
    return [Minimum(int(k), float(vals[k]), X[k].copy()) for k in keep]


# ---------------------------------------------------------------------------
# basins and estimates
# ---------------------------------------------------------------------------

def iso_levels(field_: TopoField, n_levels: int = N_LEVELS) -> np.ndarray:
    if n_levels < 2:
        raise ValueError("n_levels must be >= 2")
    v = field_.nodal
    return np.linspace(v.min(), v.max(), n_levels)


def _hop_labels(mesh: Mesh, sources: list[int]) -> np.ndarray:
    label = np.full(mesh.n_vertices, -1)
    q = deque()
    for i, s in enumerate(sources):
        label[s] = i
        q.append(s)
    nbrs = mesh.vertex_neighbors
    while q:
        a = q.popleft()
        for b in nbrs[a]:
            if label[b] < 0:
                label[b] = label[a]
                q.append(b)
    return label


def extract_basins(field_: TopoField, minima: list[Minimum], n_levels: int = N_LEVELS) -> np.ndarray:
    """Attach to each minimum the connected region below the first level above it.

    Regions shared by several minima are split by hop distance so the basins
    stay disjoint. Returns the levels used.
    """
    levels = iso_levels(field_, n_levels)
    if not minima:
        return levels
    v = field_.nodal
    mesh = field_.mesh
    A = _adjacency(mesh)
    label = _hop_labels(mesh, [m.node for m in minima])
    for i, m in enumerate(minima):
        above = levels[levels > m.value]
        thr = above[0] if len(above) else np.inf
        inside = v < thr
        idx = np.flatnonzero(inside)
        sub = A[idx][:, idx]
        _, comp = connected_components(sub, directed=False)
        pos = np.searchsorted(idx, m.node)
        region = idx[comp == comp[pos]]
        m.basin = region[label[region] == i]
    return levels


def estimate_center_radius(minima: list[Minimum], field_: TopoField, r_cal: float = R_CAL):
    """Center = mean of minima locations; radius from the relative depth (qualitative only)."""
    if not minima:
        raise NoMinima("no qualifying minima")
    center = np.mean([m.point for m in minima], axis=0)
    v = field_.nodal
    span = v.max() - v.min()
    deepest = min(m.value for m in minima)
    radius = r_cal * abs(deepest) / span if span > 0 else 0.0
    return center, float(radius)


def one_shot_detect(scenario, ring_depth: int = RING_DEPTH, n_levels: int = N_LEVELS,
                    min_persistence: float = MIN_PERSISTENCE, system=None) -> DetectionResult:
    """State with mu = 0, adjoint with source -2 u_i, field, minima, basins, estimates."""
    mesh, beta, deg = scenario.mesh, scenario.beta, scenario.degree
    if scenario.data.degree != deg or len(scenario.data.nodes) != len(fe_space(mesh, deg).boundary_dofs):
        raise MeshMismatch("Cauchy data are not on the inversion mesh")
    system = system or assemble_ccbm(mesh, None, beta, deg)
    u = solve_state(mesh, None, beta, scenario.data, deg, system=system)
    v = solve_topo_adjoint(mesh, None, beta, u.im, deg, system=system)
    fld = topo_gradient_field(u, v, mesh)
    d = scenario.data
    scale = max(np.abs(u.re).max(), np.abs(u.im).max(), np.abs(d.f).max(), np.abs(d.g).max()) ** 2
    if fld.nodal.min() >= -ZERO_TOL * (scale or 1.0):
        raise NoNegativeMinimum(f"min dJ = {fld.nodal.min():.3e}; no contact detected")
    minima = find_local_minima(fld, ring_depth, min_persistence)
    levels = extract_basins(fld, minima, n_levels)
    center, radius = estimate_center_radius(minima, fld)
    return DetectionResult(minima, center, radius, levels, fld, u, v)


def render_detection(result: DetectionResult, path, truth=None, n_contours: int | None = None) -> None:
    fld = result.field
    mesh = fld.mesh
    cv = SvgCanvas(mesh.bounds)
    v = fld.nodal
    in_basin = np.zeros(mesh.n_vertices, dtype=bool)
    for m in result.minima:
        in_basin[m.basin] = True
    tri = mesh.triangles[in_basin[mesh.triangles].all(1)]
    for t in tri:
        cv.polygon(mesh.vertices[t], fill="cyan", opacity=0.8)
    levels = result.iso_levels if n_contours is None else np.linspace(v.min(), v.max(), n_contours)
    for lev in levels[1:-1]:
        cv.segments(contour_segments(mesh, v, lev), stroke="gray", width=0.5)
    if truth is not None:
        _draw_truth(cv, truth)
    for m in result.minima:
        cv.circle(m.point, 4, "magenta")
    cv.frame()
    cv.save(path)


def _draw_truth(cv: SvgCanvas, truth) -> None:
    from .mesh import Disc, Square
    for s in truth.shapes:
        if isinstance(s, Disc):
            t = np.linspace(0, 2 * np.pi, 121)
            cv.polyline(np.column_stack([s.center[0] + s.radius * np.cos(t),
                                         s.center[1] + s.radius * np.sin(t)]), "black", 1.5)
        elif isinstance(s, Square):
            (cx, cy), h = s.center, s.half_width
            cv.polyline([(cx - h, cy - h), (cx + h, cy - h), (cx + h, cy + h), (cx - h, cy + h)],
                        "black", 1.5, closed=True)
