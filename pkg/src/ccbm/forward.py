"""
Synthetic Cauchy data, noise models and fine-to-coarse trace transfer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .assembly import CauchyData, FESpace, fe_space, solve_neumann
from .errors import EmptyInclusion, GeometryMismatch
from .mesh import UNIT_SQUARE, InclusionSpec, Mesh, build_rect_mesh

GProfile = Union[str, Callable[[np.ndarray], np.ndarray]]

MULTIPLICATIVE = "multiplicative-field"
ADDITIVE = "additive-boundary"


@dataclass(frozen=True)
class NoiseModel:
    kind: str = ADDITIVE
    delta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (MULTIPLICATIVE, ADDITIVE):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not self.delta >= 0:
            raise ValueError("delta must be nonnegative")


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for ``(seed, stream)``; streams are independent."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


def boundary_profile(profile: GProfile) -> Callable[[np.ndarray], np.ndarray]:
    """Named boundary flux: ``"one"`` (g = 1) or ``"abs-x"`` (g = |x|); callables pass through."""
    if callable(profile):
        return profile
    if profile in ("one", "constant-one"):
        return lambda p: np.ones(len(p))
    if profile == "abs-x":
        return lambda p: np.abs(p[:, 0])
    raise ValueError(f"unknown g profile {profile!r}")


def sampled_profile(s: np.ndarray, values: np.ndarray, perimeter: float,
                    bounds=UNIT_SQUARE) -> Callable[[np.ndarray], np.ndarray]:
    """Profile from samples over the boundary arclength (periodic linear interpolation)."""
    s = np.asarray(s, dtype=float)
    values = np.asarray(values, dtype=float)

    def fn(points):
        return np.interp(arclength(points, bounds), s, values, period=perimeter)
    return fn


def arclength(points: np.ndarray, bounds=UNIT_SQUARE) -> np.ndarray:
    """Counter-clockwise arclength from the lower-left corner for points on the rectangle."""
    xmin, xmax, ymin, ymax = bounds
    w, h = xmax - xmin, ymax - ymin
    x, y = points[:, 0], points[:, 1]
    tol = 1e-12 * max(w, h)
    s = np.empty(len(points))
    bottom = np.abs(y - ymin) <= tol
    right = ~bottom & (np.abs(x - xmax) <= tol)
    top = ~bottom & ~right & (np.abs(y - ymax) <= tol)
    left = ~bottom & ~right & ~top
    s[bottom] = x[bottom] - xmin
    s[right] = w + (y[right] - ymin)
    s[top] = w + h + (xmax - x[top])
    s[left] = 2 * w + h + (ymax - y[left])
    return s


@dataclass
class ForwardProblemSpec:
    truth: InclusionSpec | None
    g_profile: GProfile = "one"
    fine_mesh: Mesh | None = None
    degree: int = 2

    def __post_init__(self):
        if self.fine_mesh is None:
            bounds = self.truth.bounds if self.truth is not None else UNIT_SQUARE
            self.fine_mesh = build_rect_mesh(200, 200, bounds)


def generate_cauchy_data(spec: ForwardProblemSpec) -> tuple[CauchyData, np.ndarray]:
    """Solve the real Neumann problem with the true inclusion; ``f`` is the trace of ``u``."""
    if spec.truth is None:
        raise EmptyInclusion("the forward Neumann problem needs a nonempty inclusion")
    mesh = spec.fine_mesh
    space = fe_space(mesh, spec.degree)
    if not spec.truth.contains(mesh.barycenters).any():
        raise EmptyInclusion("the inclusion covers no element of the forward mesh")
    g = boundary_profile(spec.g_profile)(space.points[space.boundary_dofs])
    if not np.any(g):
        raise ValueError("g profile is identically zero")
    u = solve_neumann(mesh, spec.truth, g, spec.degree)
    return CauchyData.on(space, g, u[space.boundary_dofs]), u


def harmonic_cauchy_data(mesh: Mesh, g_profile: GProfile, degree: int = 1) -> tuple[CauchyData, np.ndarray]:
    """Consistent data without any inclusion (``g`` is projected to zero discrete flux)."""
    space = fe_space(mesh, degree)
    g = boundary_profile(g_profile)(space.points[space.boundary_dofs])
    w = space.B @ np.ones(space.n_dofs)
    wb = w[space.boundary_dofs]
    g0 = np.abs(g).max()
    g = g - (wb @ g) / wb.sum()
    if np.abs(g).max() <= 1e-12 * g0:
        raise ValueError("flux profile has no zero-mean part; data without inclusion would be trivial")
    u = solve_neumann(mesh, None, g, degree)
    return CauchyData.on(space, g, u[space.boundary_dofs]), u


def add_noise(u: np.ndarray, model: NoiseModel, stream: int = 0) -> np.ndarray:
    """``u * (1 + delta * eta)`` with ``eta`` Gaussian of standard deviation ``max|u|``."""
    if model.kind != MULTIPLICATIVE:
        raise ValueError("add_noise needs a multiplicative-field model")
    u = np.asarray(u, dtype=float)
    if model.delta == 0:
        return u.copy()
    eta = rng_stream(model.seed, stream).standard_normal(u.shape) * np.abs(u).max()
    return u * (1.0 + model.delta * eta)


def perturb_boundary(f: np.ndarray, model: NoiseModel, stream: int = 0) -> np.ndarray:
    """``f + xi`` with white Gaussian ``xi`` of standard deviation ``delta * max|f|``."""
    if model.kind != ADDITIVE:
        raise ValueError("perturb_boundary needs an additive-boundary model")
    f = np.asarray(f, dtype=float)
    if model.delta == 0:
        return f.copy()
    xi = rng_stream(model.seed, stream).standard_normal(f.shape)
    return f + model.delta * np.abs(f).max() * xi


def boundary_noise_batch(f: np.ndarray, delta: float, seed: int, streams) -> np.ndarray:
    """Columns ``f + xi_k`` for each stream id (same draws as :func:`perturb_boundary`)."""
    model = NoiseModel(ADDITIVE, delta, seed)
    return np.column_stack([perturb_boundary(f, model, k) for k in streams])


def transfer_trace(values: np.ndarray, fine_mesh: Mesh, coarse_mesh: Mesh,
                   fine_degree: int = 2, coarse_degree: int = 1) -> np.ndarray:
    """Piecewise-linear interpolation of boundary-loop values onto the coarse boundary nodes."""
    if not np.allclose(fine_mesh.bounds, coarse_mesh.bounds, rtol=0, atol=1e-12):
        raise GeometryMismatch(f"{fine_mesh.bounds} != {coarse_mesh.bounds}")
    fs, cs = fe_space(fine_mesh, fine_degree), fe_space(coarse_mesh, coarse_degree)
    values = np.asarray(values, dtype=float)
    if len(values) != len(fs.boundary_dofs):
        raise ValueError("values do not match the fine boundary")
    s_f = arclength(fs.points[fs.boundary_dofs], fine_mesh.bounds)
    s_c = arclength(cs.points[cs.boundary_dofs], coarse_mesh.bounds)
    return np.interp(s_c, s_f, values, period=fs.perimeter)


# ---------------------------------------------------------------------------
# inverse scenario: data prepared on the inversion mesh
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    """Everything the inversion stages need: coarse mesh, its Cauchy data and parameters."""

    mesh: Mesh
    data: CauchyData
    mu0: float
    beta: float = 200.0
    degree: int = 1
    truth: InclusionSpec | None = None
    clean_f: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def space(self) -> FESpace:
        return fe_space(self.mesh, self.degree)

    def with_beta(self, beta: float) -> "Scenario":
        return Scenario(self.mesh, self.data, self.mu0, beta, self.degree, self.truth, self.clean_f, dict(self.info))

    def with_data(self, data: CauchyData) -> "Scenario":
        return Scenario(self.mesh, data, self.mu0, self.beta, self.degree, self.truth, self.clean_f, dict(self.info))


def build_scenario(truth: InclusionSpec | None, g_profile: GProfile = "one", *, beta: float = 200.0,
                   mu0: float | None = None, fine: tuple[int, int] = (200, 200),
                   coarse: tuple[int, int] = (100, 100), fine_degree: int = 2, coarse_degree: int = 1,
                   noise: NoiseModel | None = None, consistency: bool = False,
                   bounds=UNIT_SQUARE, fine_cache: dict | None = None) -> Scenario:
    """Generate data on the forward mesh and transfer it to the inversion mesh.

    With ``consistency=True`` the data are generated on the inversion mesh and
    degree themselves (a deliberate inverse crime, for testing only); a truth
    of ``None`` is then allowed and yields inclusion-free consistent data.
    ``fine_cache`` (optional dict) memoizes clean forward solutions.
    """
    coarse_mesh = build_rect_mesh(*coarse, bounds)
    if mu0 is None:
        mu0 = truth.mu0 if truth is not None else 10.0
    if consistency:
        fmesh, fdeg = coarse_mesh, coarse_degree
    else:
        if (tuple(fine), fine_degree) == (tuple(coarse), coarse_degree):
            raise ValueError("forward and inverse discretizations coincide; pass consistency=True")
        fmesh, fdeg = None, fine_degree

    key = (truth, g_profile if isinstance(g_profile, str) else id(g_profile), tuple(fine), fdeg,
           consistency, tuple(coarse), tuple(bounds))
    cached = fine_cache.get(key) if fine_cache is not None else None
    if cached is not None:
        fmesh, fdata, u = cached
    else:
        if fmesh is None:
            fmesh = build_rect_mesh(*fine, bounds)
        if truth is None:
            if not consistency:
                raise EmptyInclusion("inclusion-free data are only available in consistency mode")
            fdata, u = harmonic_cauchy_data(fmesh, g_profile, fdeg)
        else:
            fdata, u = generate_cauchy_data(ForwardProblemSpec(truth, g_profile, fmesh, fdeg))
        if fine_cache is not None:
            fine_cache[key] = (fmesh, fdata, u)

    fspace = fe_space(fmesh, fdeg)
    f_fine = fdata.f
    if noise is not None and noise.delta > 0:
        if noise.kind == MULTIPLICATIVE:
            f_fine = add_noise(u, noise)[fspace.boundary_dofs]
        else:
            f_fine = perturb_boundary(f_fine, noise)
    if consistency:
        g_c, f_c, clean = fdata.g, f_fine, fdata.f
    else:
        g_c = transfer_trace(fdata.g, fmesh, coarse_mesh, fdeg, coarse_degree)
        f_c = transfer_trace(f_fine, fmesh, coarse_mesh, fdeg, coarse_degree)
        clean = transfer_trace(fdata.f, fmesh, coarse_mesh, fdeg, coarse_degree)
    data = CauchyData.on(fe_space(coarse_mesh, coarse_degree), g_c, f_c)
    info = {"fine": list(fine) if not consistency else list(coarse), "fine_degree": fdeg,
            "coarse": list(coarse), "coarse_degree": coarse_degree, "consistency": consistency,
            "noise": None if noise is None else {"kind": noise.kind, "delta": noise.delta, "seed": noise.seed}}
    return Scenario(coarse_mesh, data, float(mu0), float(beta), coarse_degree, truth, clean, info)


def write_cauchy_csv(path, data: CauchyData) -> None:
    with open(path, "w") as fh:
        fh.write("s,x,y,g,f\n")
        for s, (x, y), g, f in zip(data.s, data.points, data.g, data.f):
            fh.write(f"{float(s)!r},{float(x)!r},{float(y)!r},{float(g)!r},{float(f)!r}\n")


def read_cauchy_csv(path, space: FESpace) -> CauchyData:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if len(arr) != len(space.boundary_dofs):
        raise GeometryMismatch(f"{path}: {len(arr)} rows for {len(space.boundary_dofs)} boundary nodes")
    return CauchyData.on(space, arr[:, 3], arr[:, 4])
