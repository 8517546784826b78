"""
Finite-element assembly and solves for the complex-Robin problems.

A complex system ``(P + i Q) z = b`` is realized as the real block system

    [[P, -Q],   [re]   [Re b]
     [Q,  P]] @ [im] = [Im b]

with ``P = K + M_mu`` (stiffness plus reaction mass) and ``Q = beta * B``
(boundary mass). The adjoint operator ``P - i Q`` is exactly the transpose
of that block matrix, so one LU factorization serves both the state and the
adjoint solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import MeshMismatch, SolverFailure
from .mesh import InclusionSpec, Interface, Mesh

# Dunavant degree-4 rule on the reference triangle (barycentric points, weights sum to 1)
_Q6_A, _Q6_B = 0.445948490915965, 0.091576213509771
QUAD6_POINTS = np.array([
    [1 - 2 * _Q6_A, _Q6_A, _Q6_A], [_Q6_A, 1 - 2 * _Q6_A, _Q6_A], [_Q6_A, _Q6_A, 1 - 2 * _Q6_A],
    [1 - 2 * _Q6_B, _Q6_B, _Q6_B], [_Q6_B, 1 - 2 * _Q6_B, _Q6_B], [_Q6_B, _Q6_B, 1 - 2 * _Q6_B],
])
QUAD6_WEIGHTS = np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)

RESIDUAL_TOL = 1e-10


def _p2_basis(lam: np.ndarray) -> np.ndarray:
    """P2 basis values at barycentric points ``lam`` (n, 3) -> (n, 6).

    Local order: vertices 0, 1, 2, then midpoints of the edges opposite 0, 1, 2.
    """
    l0, l1, l2 = lam.T
    return np.column_stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                            4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1])


def _p2_grad_coeffs(lam: np.ndarray) -> np.ndarray:
    """Coefficients C with grad(phi_i) = sum_m C[q, i, m] grad(lambda_m)."""
    n = len(lam)
    C = np.zeros((n, 6, 3))
    for i in range(3):
        C[:, i, i] = 4 * lam[:, i] - 1
    for k, (a, b) in enumerate(((1, 2), (2, 0), (0, 1))):
        C[:, 3 + k, a] = 4 * lam[:, b]
        C[:, 3 + k, b] = 4 * lam[:, a]
    return C


def _scatter(dofs: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    k = dofs.shape[1]
    rows = np.repeat(dofs, k, axis=1).ravel()
    cols = np.tile(dofs, (1, k)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


class FESpace:
    """Continuous Lagrange space of degree 1 or 2 on a mesh, with cached matrices."""

    def __init__(self, mesh: Mesh, degree: int):
        if degree not in (1, 2):
            raise ValueError(f"degree must be 1 or 2, got {degree}")
        self.mesh = mesh
        self.degree = degree
        nv = mesh.n_vertices
        if degree == 1:
            self.n_dofs = nv
            self.points = mesh.vertices
            self.cell_dofs = mesh.triangles
        else:
            e = mesh.edges
            self.n_dofs = nv + len(e)
            self.points = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])])
            self.cell_dofs = np.hstack([mesh.triangles, nv + mesh.triangle_edges])

        be = mesh.boundary_edges
        if degree == 1:
            self.boundary_edge_dofs = be
            loop = be[:, 0]
        else:
            key = mesh.edges[:, 0] * nv + mesh.edges[:, 1]
            mid = nv + np.searchsorted(key, be.min(axis=1) * nv + be.max(axis=1))
            self.boundary_edge_dofs = np.column_stack([be, mid])
            loop = np.column_stack([be[:, 0], mid]).ravel()
        self.boundary_dofs = loop
        steps = np.linalg.norm(np.diff(self.points[np.append(loop, loop[0])], axis=0), axis=1)
        self.boundary_s = np.concatenate([[0.0], np.cumsum(steps)[:-1]])
        self.perimeter = float(steps.sum())

    @property
    def vertex_dofs(self) -> np.ndarray:
        return np.arange(self.mesh.n_vertices)

    # -- element matrices -------------------------------------------------
    @cached_property
    def _geometry(self):
        p = self.mesh.vertices[self.mesh.triangles]
        area = self.mesh.signed_areas
        grads = np.empty((len(p), 3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            grads[:, i, 0] = p[:, j, 1] - p[:, k, 1]
            grads[:, i, 1] = p[:, k, 0] - p[:, j, 0]
        grads /= (2 * area)[:, None, None]
        return area, grads

    @cached_property
    def local_stiffness(self) -> np.ndarray:
        area, grads = self._geometry
        D = np.einsum("emk,enk->emn", grads, grads)
        if self.degree == 1:
            return area[:, None, None] * D
        C = _p2_grad_coeffs(QUAD6_POINTS)
        T = np.einsum("q,qim,qjn->ijmn", QUAD6_WEIGHTS, C, C).reshape(36, 9)
        return area[:, None, None] * (D.reshape(-1, 9) @ T.T).reshape(-1, 6, 6)

    @cached_property
    def local_mass(self) -> np.ndarray:
        area, _ = self._geometry
        if self.degree == 1:
            ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
        else:
            phi = _p2_basis(QUAD6_POINTS)
            ref = np.einsum("q,qi,qj->ij", QUAD6_WEIGHTS, phi, phi)
        return area[:, None, None] * ref[None]

    @cached_property
    def K(self) -> sp.csr_matrix:
        return _scatter(self.cell_dofs, self.local_stiffness, self.n_dofs)

    @cached_property
    def M(self) -> sp.csr_matrix:
        return _scatter(self.cell_dofs, self.local_mass, self.n_dofs)

    def weighted_mass(self, coef: np.ndarray) -> sp.csr_matrix:
        """Mass matrix with an element-wise constant coefficient."""
        coef = np.asarray(coef, dtype=float)
        keep = coef != 0
        return _scatter(self.cell_dofs[keep], coef[keep, None, None] * self.local_mass[keep], self.n_dofs)

    @cached_property
    def B(self) -> sp.csr_matrix:
        """Boundary mass matrix on the outer boundary."""
        pts = self.points
        d = self.boundary_edge_dofs
        L = np.linalg.norm(pts[d[:, 1]] - pts[d[:, 0]], axis=1)
        if self.degree == 1:
            ref = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
        else:
            ref = np.array([[4.0, -1.0, 2.0], [-1.0, 4.0, 2.0], [2.0, 2.0, 16.0]]) / 30.0
        return _scatter(d, L[:, None, None] * ref[None], self.n_dofs)

    # -- point evaluation -------------------------------------------------
    def basis_at(self, points: np.ndarray) -> sp.csr_matrix:
        """Sparse evaluation operator E with ``E @ values`` = field at ``points``."""
        tri, lam = self.mesh.locate(points)
        if (tri < 0).any():
            raise ValueError(f"{int((tri < 0).sum())} point(s) outside the mesh")
        vals = lam if self.degree == 1 else _p2_basis(lam)
        dofs = self.cell_dofs[tri]
        rows = np.repeat(np.arange(len(points)), dofs.shape[1])
        return sp.csr_matrix((vals.ravel(), (rows, dofs.ravel())), shape=(len(points), self.n_dofs))

    def interpolate(self, fn) -> np.ndarray:
        return np.asarray(fn(self.points), dtype=float)

    def boundary_full(self, values: np.ndarray) -> np.ndarray:
        """Embed boundary-loop values into a full dof vector (zero in the interior)."""
        out = np.zeros(self.n_dofs)
        out[self.boundary_dofs] = values
        return out


def fe_space(mesh: Mesh, degree: int) -> FESpace:
    """Cached :class:`FESpace` for ``(mesh, degree)``."""
    sp_ = mesh._spaces.get(degree)
    if sp_ is None:
        sp_ = mesh._spaces[degree] = FESpace(mesh, degree)
    return sp_


def element_coefficient(mesh: Mesh, mu: InclusionSpec | float | None) -> np.ndarray:
    """Per-triangle reaction coefficient.

    ``InclusionSpec`` marks the region by barycenters; a float uses the mesh's
    own region tags (the deforming interface of the shape stage); ``None``
    means no inclusion.
    """
    if mu is None:
        return np.zeros(mesh.n_triangles)
    if isinstance(mu, InclusionSpec):
        return mu.mu0 * mu.contains(mesh.barycenters)
    return float(mu) * mesh.element_region


# ---------------------------------------------------------------------------
# field and data containers
# ---------------------------------------------------------------------------

@dataclass
class ComplexField:
    re: np.ndarray
    im: np.ndarray
    degree: int
    mesh: Mesh | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.re = np.asarray(self.re, dtype=float)
        self.im = np.asarray(self.im, dtype=float)
        if self.re.shape != self.im.shape:
            raise ValueError("re and im differ in length")
        if self.mesh is not None and len(self.re) != fe_space(self.mesh, self.degree).n_dofs:
            raise ValueError("field length does not match the mesh node count")

    @property
    def value(self) -> np.ndarray:
        return self.re + 1j * self.im

    def __len__(self):
        return len(self.re)


@dataclass
class CauchyData:
    """Neumann flux ``g`` and Dirichlet trace ``f`` on the boundary nodes of one space.

    Arrays follow the boundary loop order of the space (``nodes``), with
    arclength parameter ``s`` measured counter-clockwise from the lower-left corner.
    """

    nodes: np.ndarray
    s: np.ndarray
    points: np.ndarray
    g: np.ndarray
    f: np.ndarray
    degree: int

    def __post_init__(self):
        if not np.any(self.g) and not np.any(self.f):
            raise ValueError("Cauchy data must be nontrivial")

    @classmethod
    def on(cls, space: FESpace, g, f) -> "CauchyData":
        n = len(space.boundary_dofs)
        g = np.broadcast_to(np.asarray(g, dtype=float), (n,)).copy()
        f = np.broadcast_to(np.asarray(f, dtype=float), (n,)).copy()
        return cls(space.boundary_dofs.copy(), space.boundary_s.copy(),
                   space.points[space.boundary_dofs].copy(), g, f, space.degree)

    def with_f(self, f: np.ndarray) -> "CauchyData":
        return CauchyData(self.nodes, self.s, self.points, self.g, np.asarray(f, dtype=float), self.degree)

    def scaled(self, lam: float) -> "CauchyData":
        return CauchyData(self.nodes, self.s, self.points, lam * self.g, lam * self.f, self.degree)


# ---------------------------------------------------------------------------
# system matrix
# ---------------------------------------------------------------------------

class SystemMatrix:
    """Factorized block realization of ``a(w, v) = (grad w, grad v) + (mu w, v) + i beta <w, v>``."""

    def __init__(self, space: FESpace, coef: np.ndarray, beta: float,
                 extra: sp.spmatrix | None = None):
        if not beta > 0:
            raise ValueError(f"beta must be positive, got {beta}")
        self.space = space
        self.beta = float(beta)
        self.coef = np.asarray(coef, dtype=float)
        P = space.K + space.weighted_mass(self.coef)
        if extra is not None:
            P = P + extra
        self.P = P.tocsr()
        self.Q = (self.beta * space.B).tocsr()
        n = space.n_dofs
        self.n = n
        # interleave (re_k, im_k) so the factorization sees the 2D mesh graph
        block = sp.bmat([[self.P, -self.Q], [self.Q, self.P]], format="csr")
        self._perm = np.column_stack([np.arange(n), n + np.arange(n)]).ravel()
        self.matrix = block[self._perm][:, self._perm].tocsc()
        try:
            self.lu = spla.splu(self.matrix, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise SolverFailure(f"factorization failed: {exc}") from exc

    def _solve(self, rhs: np.ndarray, trans: str) -> np.ndarray:
        """Solve with a complex right-hand side (n,) or (n, k); returns complex."""
        rhs = np.asarray(rhs)
        flat = rhs.ndim == 1
        R = rhs.reshape(self.n, -1)
        b = np.empty((2 * self.n, R.shape[1]))
        b[0::2] = R.real
        b[1::2] = R.imag
        x = self.lu.solve(b, trans=trans)
        A = self.matrix if trans == "N" else self.matrix.T
        for _ in range(2):
            r = b - A @ x
            rn = np.linalg.norm(r, axis=0)
            bn = np.maximum(np.linalg.norm(b, axis=0), np.finfo(float).tiny)
            if np.all(rn <= RESIDUAL_TOL * bn):
                break
            x += self.lu.solve(r, trans=trans)
        else:
            r = b - A @ x
            rel = np.linalg.norm(r, axis=0) / np.maximum(np.linalg.norm(b, axis=0), np.finfo(float).tiny)
            if np.any(rel > RESIDUAL_TOL) or not np.all(np.isfinite(x)):
                raise SolverFailure(f"relative residual {rel.max():.2e} exceeds {RESIDUAL_TOL:g}")
        z = x[0::2] + 1j * x[1::2]
        return z[:, 0] if flat else z

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._solve(rhs, "N")

    def solve_adjoint(self, rhs: np.ndarray) -> np.ndarray:
        """Solve with ``P - i Q`` (the transposed block system)."""
        return self._solve(rhs, "T")

    def apply(self, z: np.ndarray) -> np.ndarray:
        return self.P @ z + 1j * (self.Q @ z)

    def form(self, w: np.ndarray, v: np.ndarray) -> complex:
        """Sesquilinear form ``a(w, v)`` for nodal complex vectors."""
        return complex(np.vdot(v, self.apply(w)))

    def state_rhs(self, data: CauchyData) -> np.ndarray:
        sp_ = self.space
        B = sp_.B
        return B @ sp_.boundary_full(data.g) + 1j * self.beta * (B @ sp_.boundary_full(data.f))

    def state_rhs_batch(self, g: np.ndarray, F: np.ndarray) -> np.ndarray:
        """Right-hand sides for one flux and many Dirichlet traces ``F`` (n_boundary, k)."""
        sp_ = self.space
        full = np.zeros((self.n, F.shape[1]))
        full[sp_.boundary_dofs] = F
        return (sp_.B @ sp_.boundary_full(g))[:, None] + 1j * self.beta * (sp_.B @ full)


def assemble_ccbm(mesh: Mesh, spec: InclusionSpec | float | None, beta: float, degree: int = 1,
                  extra: sp.spmatrix | None = None) -> SystemMatrix:
    """Assemble and factorize the CCBM system; see :func:`element_coefficient` for ``spec``."""
    space = fe_space(mesh, degree)
    return SystemMatrix(space, element_coefficient(mesh, spec), beta, extra=extra)


def _field(z: np.ndarray, space: FESpace) -> ComplexField:
    return ComplexField(z.real.copy(), z.imag.copy(), space.degree, space.mesh)


def solve_state(mesh: Mesh, spec, beta: float, data: CauchyData, degree: int = 1,
                system: SystemMatrix | None = None) -> ComplexField:
    """Discrete solution of ``-lap u + mu u = 0``, ``d_n u + i beta u = g + i beta f``."""
    system = system or assemble_ccbm(mesh, spec, beta, degree)
    if data.degree != system.space.degree or len(data.nodes) != len(system.space.boundary_dofs):
        raise MeshMismatch("Cauchy data live on a different boundary discretization")
    return _field(system.solve(system.state_rhs(data)), system.space)


def solve_topo_adjoint(mesh: Mesh, spec, beta: float, u_i: np.ndarray, degree: int = 1,
                       system: SystemMatrix | None = None) -> ComplexField:
    """Adjoint ``-lap v + mu v = -2 u_i``, ``d_n v - i beta v = 0``; source by consistent mass."""
    system = system or assemble_ccbm(mesh, spec, beta, degree)
    u_i = np.asarray(u_i, dtype=float)
    if len(u_i) != system.n:
        raise MeshMismatch("u_i does not match the mesh node count")
    return _field(system.solve_adjoint(-2.0 * (system.space.M @ u_i)), system.space)


def solve_shape_adjoint(mesh: Mesh, spec, mu0: float | None, beta: float, u_i: np.ndarray,
                        degree: int = 1, system: SystemMatrix | None = None) -> ComplexField:
    """Shape-stage adjoint with ``mu = mu0 * chi_omega``.

    ``spec`` may be an :class:`InclusionSpec` or ``None``; with ``None`` the
    mesh's own region tags and ``mu0`` define the coefficient.
    """
    coef_src = spec if spec is not None else mu0
    if coef_src is None:
        raise ValueError("need either an inclusion spec or mu0")
    system = system or assemble_ccbm(mesh, coef_src, beta, degree)
    if not np.any(system.coef):
        raise ValueError("the shape adjoint needs a nonempty region")
    return solve_topo_adjoint(mesh, None, beta, u_i, degree, system=system)


def cost_J(u_i: np.ndarray, mesh: Mesh, degree: int = 1) -> float:
    """``int u_i^2`` (exact for the element order via the consistent mass matrix)."""
    M = fe_space(mesh, degree).M
    u_i = np.asarray(u_i, dtype=float)
    return float(u_i @ (M @ u_i))


def solve_neumann(mesh: Mesh, spec: InclusionSpec | float | None, g: np.ndarray, degree: int = 1) -> np.ndarray:
    """Real problem ``-lap u + mu u = 0``, ``d_n u = g`` (g on boundary-loop nodes).

    Without an inclusion the system is singular; it is then solved in the
    zero-mean subspace after projecting ``g`` to discrete compatibility.
    """
    space = fe_space(mesh, degree)
    coef = element_coefficient(mesh, spec)
    A = (space.K + space.weighted_mass(coef)).tocsc()
    b = space.B @ space.boundary_full(g)
    if np.any(coef):
        try:
            return spla.splu(A, permc_spec="MMD_AT_PLUS_A").solve(b)
        except RuntimeError as exc:
            raise SolverFailure(str(exc)) from exc
    ones = np.ones(space.n_dofs)
    w = space.M @ ones
    b = b - ones * (ones @ b) / space.n_dofs
    # bordered system [[A, w], [w^T, 0]] pins the mean
    Ab = sp.bmat([[A, sp.csc_matrix(w[:, None])], [sp.csc_matrix(w[None, :]), None]], format="csc")
    x = spla.splu(Ab, permc_spec="MMD_AT_PLUS_A").solve(np.append(b, 0.0))
    return x[:-1]


# ---------------------------------------------------------------------------
# Sobolev (H1) extension of an interface density
# ---------------------------------------------------------------------------

class ExtensionSolver:
    """Factorized ``(grad th, grad phi) + (th, phi)`` on P1 with ``th = 0`` on the outer boundary."""

    def __init__(self, mesh: Mesh):
        space = fe_space(mesh, 1)
        self.space = space
        self.A = (space.K + space.M).tocsr()
        free = np.ones(mesh.n_vertices, dtype=bool)
        free[mesh.boundary_vertices] = False
        self.free = np.flatnonzero(free)
        Aff = self.A[self.free][:, self.free].tocsc()
        self.lu = spla.splu(Aff, permc_spec="MMD_AT_PLUS_A")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """rhs of shape (n_vertices, 2) -> vector field (n_vertices, 2)."""
        out = np.zeros_like(rhs, dtype=float)
        out[self.free] = self.lu.solve(np.ascontiguousarray(rhs[self.free]))
        return out

    def norm2(self, theta: np.ndarray) -> float:
        """Squared H1 norm ``||grad th||^2 + ||th||^2``."""
        return float(np.einsum("ij,ij->", theta, self.A @ theta))


def interface_load(mesh: Mesh, interface: Interface, G: np.ndarray) -> np.ndarray:
    """Nodal vector ``[int_{d omega} G n_k phi_i ds]_k`` with ``G`` given on all vertices."""
    a, b = interface.edges[:, 0], interface.edges[:, 1]
    L = interface.lengths
    Ga, Gb = G[a], G[b]
    ia = L * (2 * Ga + Gb) / 6.0
    ib = L * (Ga + 2 * Gb) / 6.0
    out = np.zeros((mesh.n_vertices, 2))
    np.add.at(out, a, ia[:, None] * interface.normals)
    np.add.at(out, b, ib[:, None] * interface.normals)
    return out


def solve_sobolev_extension(mesh: Mesh, interface: Interface, G: np.ndarray,
                            solver: ExtensionSolver | None = None) -> np.ndarray:
    """Vector field ``th`` in H1_0 with ``(th, phi)_{H1} = -<G n, phi>_{d omega}``.

    ``G`` is a per-vertex array (only values on interface nodes matter);
    normals are the outward edge normals stored in ``interface``.
    """
    G = np.asarray(G, dtype=float)
    if G.shape != (mesh.n_vertices,):
        raise ValueError("G must be given per mesh vertex")
    solver = solver or ExtensionSolver(mesh)
    return solver.solve(-interface_load(mesh, interface, G))


def interface_pairing(interface: Interface, G: np.ndarray, theta: np.ndarray) -> float:
    """``int_{d omega} G (theta . n) ds`` with P1 interpolation along each edge."""
    a, b = interface.edges[:, 0], interface.edges[:, 1]
    wa = np.einsum("ij,ij->i", theta[a], interface.normals)
    wb = np.einsum("ij,ij->i", theta[b], interface.normals)
    L = interface.lengths
    return float(np.sum(L / 6.0 * (2 * G[a] * wa + G[a] * wb + G[b] * wa + 2 * G[b] * wb)))


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def write_field_csv(path, space: FESpace, field_: ComplexField | np.ndarray) -> None:
    if isinstance(field_, ComplexField):
        re, im = field_.re, field_.im
    else:
        re, im = np.asarray(field_, dtype=float), np.zeros(space.n_dofs)
    with open(path, "w") as fh:
        fh.write("node,x,y,re,im\n")
        for k, ((x, y), a, b) in enumerate(zip(space.points, re, im)):
            fh.write(f"{k},{float(x)!r},{float(y)!r},{float(a)!r},{float(b)!r}\n")
