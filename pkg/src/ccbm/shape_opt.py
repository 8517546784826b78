"""
Interface refinement by Lagrangian shape optimization.

The region is the set of tagged triangles of the inversion mesh; its boundary
edges form the interface. Each iteration solves the state and the shape
adjoint, forms the interface density ``G``, extends ``-G n`` to an H1 vector
field vanishing on the outer boundary and moves every vertex along it.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .assembly import (ComplexField, ExtensionSolver, assemble_ccbm, cost_J, fe_space, interface_pairing,
                       solve_shape_adjoint, solve_sobolev_extension, solve_state)
from .errors import InterfaceNotResolved, InvertedElement, StepTooSmall, ZeroDirection
from .mesh import Disc, InclusionSpec, Mesh, deform_mesh, mark_region, min_triangle_quality
from .render import SvgCanvas


@dataclass
class ShapeOptConfig:
    beta: float = 200.0
    s: float = 0.5
    t0: float = 1e-6
    max_iters: int = 200
    quality_floor: float = 0.05  # relative to the initial minimum quality
    # stop once J fell by less than stall_rtol (relative) over stall_window
    # accepted steps; 0 disables the test
    stall_rtol: float = 1e-3
    stall_window: int = 5

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.s > 0:
            raise ValueError("s must be positive")
        if not self.t0 > 0:
            raise ValueError("t0 must be positive")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 <= self.quality_floor < 1:
            raise ValueError("quality_floor must lie in [0, 1)")
        if self.stall_rtol < 0 or int(self.stall_window) < 1:
            raise ValueError("stall_rtol must be >= 0 and stall_window >= 1")


@dataclass
class IterationRecord:
    iteration: int
    J: float
    t: float
    grad_norm: float
    theta_norm: float
    quality: float


@dataclass
class ShapeOptHistory:
    records: list[IterationRecord] = field(default_factory=list)
    mesh: Mesh | None = None
    beta: float = 200.0
    stop_reason: str = ""
    initial_mesh: Mesh | None = None

    @property
    def J(self) -> np.ndarray:
        return np.array([r.J for r in self.records])

    @property
    def initial_J(self) -> float:
        return self.records[0].J

    @property
    def final_J(self) -> float:
        return self.records[-1].J

    @property
    def n_iters(self) -> int:
        return len(self.records) - 1

    def interface_polylines(self) -> list[np.ndarray]:
        return interface_polylines(self.mesh)

    def interface_error(self, truth: InclusionSpec) -> float:
        return interface_error(self.mesh, truth)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iter,J,t,G,theta,quality\n")
            for r in self.records:
                vals = (r.J, r.t, r.grad_norm, r.theta_norm, r.quality)
                fh.write(",".join([str(r.iteration)] + [repr(float(v)) for v in vals]) + "\n")

    def write_polyline_csv(self, path) -> None:
        write_polylines_csv(path, self.interface_polylines())

    def write_svg(self, path, truth: InclusionSpec | None = None) -> None:
        render_shapes(path, self.mesh.bounds, self.initial_mesh, self.mesh, truth)


# ---------------------------------------------------------------------------
# interface helpers
# ---------------------------------------------------------------------------

def interface_polylines(mesh: Mesh) -> list[np.ndarray]:
    itf = mesh.interface()
    return [mesh.vertices[loop] for loop in itf.loops()]


def interface_error(mesh: Mesh, truth: InclusionSpec) -> float:
    """Largest distance from an interface vertex to the true region boundary."""
    itf = mesh.interface()
    if len(itf.nodes) == 0:
        raise InterfaceNotResolved("mesh has no region interface")
    return float(truth.boundary_distance(mesh.vertices[itf.nodes]).max())


def write_polylines_csv(path, polylines: list[np.ndarray]) -> None:
    with open(path, "w") as fh:
        fh.write("loop,x,y\n")
        for k, pl in enumerate(polylines):
            for x, y in np.vstack([pl, pl[:1]]):
                fh.write(f"{k},{float(x)!r},{float(y)!r}\n")


def initial_region_mesh(scenario, init: InclusionSpec) -> Mesh:
    """Inversion mesh tagged by ``init``; the region must be nonempty and away from the outer boundary."""
    mesh = mark_region(scenario.mesh, init)
    check_region(mesh)
    return mesh


def check_region(mesh: Mesh) -> None:
    reg = mesh.element_region
    if not reg.any() or reg.all():
        raise InterfaceNotResolved("region is empty or fills the whole domain")
    bnd = np.zeros(mesh.n_vertices, dtype=bool)
    bnd[mesh.boundary_vertices] = True
    if bnd[mesh.triangles[reg]].any():
        raise ValueError("initial region touches the outer boundary")


# ---------------------------------------------------------------------------
# gradient pieces
# ---------------------------------------------------------------------------

def shape_gradient_density(u: ComplexField, theta_adj: ComplexField, mu0: float,
                           mesh: Mesh | None = None) -> np.ndarray:
    """``G = mu0 (u_i th_r - u_r th_i)`` per vertex; only interface values are used."""
    mesh = mesh or u.mesh
    if mesh is None or len(mesh.interface().edges) == 0:
        raise InterfaceNotResolved("no region boundary on the mesh")
    nv = mesh.n_vertices
    return mu0 * (u.im[:nv] * theta_adj.re[:nv] - u.re[:nv] * theta_adj.im[:nv])


def initial_step(s: float, J: float, theta_norm2: float) -> float:
    """``t = s J / ||theta||^2_H1``."""
    if not theta_norm2 > 0:
        raise ZeroDirection("descent direction vanishes")
    return s * J / theta_norm2


@dataclass
class ShapeState:
    """Everything computed on one mesh: state, adjoint, density, direction."""

    mesh: Mesh
    J: float
    u: ComplexField
    adj: ComplexField
    G: np.ndarray
    theta: np.ndarray
    theta_norm2: float

    @property
    def grad_norm(self) -> float:
        nodes = self.mesh.interface().nodes
        return float(np.abs(self.G[nodes]).max())


def evaluate_J(scenario, mesh: Mesh, mu0: float, beta: float) -> tuple[float, ComplexField, object]:
    system = assemble_ccbm(mesh, mu0, beta, scenario.degree)
    data = scenario.data
    u = solve_state(mesh, None, beta, data, scenario.degree, system=system)
    return cost_J(u.im, mesh, scenario.degree), u, system


def shape_state(scenario, mesh: Mesh, mu0: float, beta: float) -> ShapeState:
    if scenario.degree != 1:
        raise ValueError("shape optimization runs on P1")
    J, u, system = evaluate_J(scenario, mesh, mu0, beta)
    adj = solve_shape_adjoint(mesh, None, mu0, beta, u.im, 1, system=system)
    G = shape_gradient_density(u, adj, mu0, mesh)
    solver = ExtensionSolver(mesh)
    theta = solve_sobolev_extension(mesh, mesh.interface(), G, solver)
    return ShapeState(mesh, J, u, adj, G, theta, solver.norm2(theta))


def shape_derivative(state: ShapeState, theta: np.ndarray) -> float:
    """``dJ[theta] = int G theta.n`` over the current interface."""
    return interface_pairing(state.mesh.interface(), state.G, theta)


def line_search(scenario, mesh: Mesh, theta: np.ndarray, t_init: float, J_current: float,
                config: ShapeOptConfig, mu0: float, quality_min: float = 0.0):
    """Halve ``t`` until the deformed mesh is valid and J decreases.

    Returns ``(t, new_mesh, new_J)``; raises StepTooSmall once ``t < t0``.
    """
    t = float(t_init)
    while t >= config.t0:
        try:
            new = deform_mesh(mesh, theta, t)
        except InvertedElement:
            t *= 0.5
            continue
        if min_triangle_quality(new) >= quality_min:
            J_new, _, _ = evaluate_J(scenario, new, mu0, config.beta)
            if J_new < J_current:
                return t, new, J_new
        t *= 0.5
    raise StepTooSmall(f"no decrease for t >= {config.t0:g}")


def optimize_shape(scenario, init: InclusionSpec | Mesh, config: ShapeOptConfig | None = None,
                   callback=None) -> ShapeOptHistory:
    """Descent loop; ``stop_reason`` on the history records why it ended."""
    config = config or ShapeOptConfig(beta=scenario.beta)
    mu0 = scenario.mu0
    mesh = init if isinstance(init, Mesh) else initial_region_mesh(scenario, init)
    check_region(mesh)
    q_floor = config.quality_floor * min_triangle_quality(mesh)
    hist = ShapeOptHistory(mesh=mesh, beta=config.beta, initial_mesh=mesh)
    k = 0
    try:
        st = shape_state(scenario, mesh, mu0, config.beta)
    except Exception as exc:
        raise type(exc)(f"iteration 0: {exc}") from exc
    hist.records.append(IterationRecord(0, st.J, 0.0, st.grad_norm, np.sqrt(st.theta_norm2),
                                        min_triangle_quality(mesh)))
    while k < config.max_iters:
        if st.J == 0.0:
            hist.stop_reason = "zero cost"
            break
        try:
            t0 = initial_step(config.s, st.J, st.theta_norm2)
        except ZeroDirection:
            hist.stop_reason = "zero direction"
            break
        try:
            t, mesh, _ = line_search(scenario, st.mesh, st.theta, t0, st.J, config, mu0, q_floor)
        except StepTooSmall:
            hist.stop_reason = "step below t0"
            break
        k += 1
        try:
            st = shape_state(scenario, mesh, mu0, config.beta)
        except Exception as exc:
            raise type(exc)(f"iteration {k}: {exc}") from exc
        rec = IterationRecord(k, st.J, t, st.grad_norm, np.sqrt(st.theta_norm2), min_triangle_quality(mesh))
        hist.records.append(rec)
        if callback is not None:
            callback(rec)
        w = config.stall_window
        if config.stall_rtol > 0 and k >= w:
            J_then = hist.records[-1 - w].J
            if J_then - st.J < config.stall_rtol * J_then:
                hist.stop_reason = "stalled"
                break
    else:
        hist.stop_reason = "max_iters"
    hist.mesh = st.mesh
    return hist


def compare_beta(scenario, init, beta_list, config: ShapeOptConfig | None = None,
                 workers: int = 1) -> dict[float, ShapeOptHistory]:
    """Identical runs that differ only in beta."""
    if not beta_list:
        raise ValueError("beta_list is empty")
    base = config or ShapeOptConfig()

    def run(beta):
        cfg = replace(base, beta=beta)
        return optimize_shape(scenario.with_beta(beta), init, cfg)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            runs = list(ex.map(run, beta_list))
    else:
        runs = [run(b) for b in beta_list]
    return {float(b): h for b, h in zip(beta_list, runs)}


# ---------------------------------------------------------------------------
# initialization from the topological stage
# ---------------------------------------------------------------------------

def boundary_profile_clusters(data, bounds, merge_dist: float = 0.1, order: int = 3) -> np.ndarray:
    """Candidate component centers from the measured boundary trace.

    Local minima of ``f`` along the boundary cast inward normal rays; pairwise
    ray intersections inside the domain are clustered and cluster means
    returned. An empty array means the profile carries no usable hint.
    """
    f = np.asarray(data.f)
    n = len(f)
    idx = np.arange(n)
    is_min = np.ones(n, dtype=bool)
    for k in range(1, order + 1):
        is_min &= (f < f[(idx - k) % n]) & (f <= f[(idx + k) % n])
    mins = np.flatnonzero(is_min)
    pts = data.points[mins]
    xmin, xmax, ymin, ymax = bounds
    nrm = np.zeros_like(pts)
    tol = 1e-9
    nrm[np.abs(pts[:, 0] - xmin) < tol, 0] += 1
    nrm[np.abs(pts[:, 0] - xmax) < tol, 0] -= 1
    nrm[np.abs(pts[:, 1] - ymin) < tol, 1] += 1
    nrm[np.abs(pts[:, 1] - ymax) < tol, 1] -= 1
    good = np.linalg.norm(nrm, axis=1) == 1  # corners have no well defined normal
    pts, nrm = pts[good], nrm[good]
    hits = []
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            A = np.column_stack([nrm[i], -nrm[j]])
            if abs(np.linalg.det(A)) < 1e-12:
                continue
            a, b = np.linalg.solve(A, pts[j] - pts[i])
            if a <= 0 or b <= 0:
                continue
            p = pts[i] + a * nrm[i]
            if xmin < p[0] < xmax and ymin < p[1] < ymax:
                hits.append(p)
    if not hits:
        return np.zeros((0, 2))
    hits = np.array(hits)
    if len(hits) == 1:
        return hits
    labels = fcluster(linkage(hits, "single"), merge_dist, criterion="distance")
    return np.array([hits[labels == c].mean(0) for c in np.unique(labels)])


def init_from_detection(minima_points, radius: float, mu0: float, bounds, h: float,
                        n_components: int | None = None) -> InclusionSpec:
    """Discs at the detected minima; radius clamped to at least two cells and inside the domain."""
    pts = np.atleast_2d(np.asarray(minima_points, dtype=float))
    if n_components is not None:
        pts = pts[:max(1, n_components)]
    xmin, xmax, ymin, ymax = bounds
    shapes = []
    for x, y in pts:
        room = min(x - xmin, xmax - x, y - ymin, ymax - y) - 2 * h
        r = float(np.clip(radius, 2 * h, max(room, 2 * h)))
        if room <= 2 * h:
            raise ValueError(f"minimum at ({x:.3f}, {y:.3f}) is too close to the boundary")
        shapes.append(Disc((float(x), float(y)), r))
    return InclusionSpec(shapes, mu0=mu0, bounds=tuple(bounds))


def init_from_topo_json(path, mu0: float, bounds, h: float, data=None) -> InclusionSpec:
    """Build the initial region from a saved detection result.

    When boundary data are given, the component count is capped by the
    number of boundary-profile clusters (if any were found).
    """
    with open(path) as fh:
        res = json.load(fh)
    pts = [(m["x"], m["y"]) for m in res["minima"]]
    if not pts:
        raise ValueError(f"{path}: no minima recorded")
    n = len(pts)
    if data is not None:
        c = len(boundary_profile_clusters(data, bounds))
        if c:
            n = min(n, c)
    return init_from_detection(pts, res["radius"], mu0, bounds, h, n)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def render_shapes(path, bounds, initial: Mesh | None, final: Mesh, truth: InclusionSpec | None) -> None:
    from .topograd import _draw_truth
    cv = SvgCanvas(bounds)
    if truth is not None:
        _draw_truth(cv, truth)
    if initial is not None:
        for pl in interface_polylines(initial):
            cv.polyline(pl, "blue", 1.0, closed=True, dash="4,3")
    for pl in interface_polylines(final):
        cv.polyline(pl, "red", 1.5, closed=True)
    cv.frame()
    cv.save(path)
