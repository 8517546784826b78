"""
Monte-Carlo statistical detection: noisy realizations of the topological
gradient, projections on Gaussian probes, pointwise confidence intervals
and the resulting rejection map.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.stats import norm

from .assembly import FESpace, SystemMatrix, assemble_ccbm, fe_space
from .errors import MeshMismatch, NoRejection, SolverFailure
from .forward import ADDITIVE, NoiseModel, perturb_boundary
from .render import SvgCanvas
from .topograd import TopoField

PROBE_CUTOFF = 6.0  # probes are truncated beyond this many widths (exp(-36) ~ 2e-16)


@dataclass(frozen=True)
class ProbeGrid:
    points: np.ndarray
    sigma: float
    n_scan: int

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("probe width must be positive")

    def __len__(self):
        return len(self.points)


def probe_grid(n_scan: int, bounds=(-0.5, 0.5, -0.5, 0.5), sigma: float | None = None) -> ProbeGrid:
    """Cell-centered ``n_scan x n_scan`` lattice; default width is 1.5 grid spacings.

    Points are ordered with x varying fastest.
    """
    if n_scan < 1:
        raise ValueError("n_scan must be >= 1")
    xmin, xmax, ymin, ymax = bounds
    hx, hy = (xmax - xmin) / n_scan, (ymax - ymin) / n_scan
    xs = xmin + (np.arange(n_scan) + 0.5) * hx
    ys = ymin + (np.arange(n_scan) + 0.5) * hy
    X, Y = np.meshgrid(xs, ys)
    sigma = 1.5 * max(hx, hy) if sigma is None else float(sigma)
    return ProbeGrid(np.column_stack([X.ravel(), Y.ravel()]), sigma, n_scan)


def gaussian_probe(center, sigma: float):
    """``x -> exp(-|x - center|^2 / sigma^2)``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    c = np.asarray(center, dtype=float)

    def probe(points):
        d2 = np.sum((np.atleast_2d(points) - c) ** 2, axis=1)
        return np.exp(-d2 / sigma**2)
    return probe


def project(field_: TopoField, probe) -> float:
    """``int dJ * probe`` with the consistent mass matrix.

    ``probe`` is a callable evaluated at the nodes of the field's space or a
    nodal array of matching length.
    """
    space = fe_space(field_.mesh, field_.degree)
    w = probe(space.points) if callable(probe) else np.asarray(probe, dtype=float)
    if len(w) != space.n_dofs:
        raise MeshMismatch("probe and field do not share the mesh")
    return float(w @ (space.M @ field_.values))


def probe_matrix(space: FESpace, grid: ProbeGrid, cutoff: float = PROBE_CUTOFF) -> sp.csr_matrix:
    """Rows ``Pi_p^T M`` so that ``probe_matrix @ dJ`` gives every projection at once."""
    from scipy.spatial import cKDTree
    tree = cKDTree(space.points)
    rows, cols, vals = [], [], []
    for p, c in enumerate(grid.points):
        idx = np.asarray(tree.query_ball_point(c, cutoff * grid.sigma), dtype=int)
        d2 = np.sum((space.points[idx] - c) ** 2, axis=1)
        rows.append(np.full(len(idx), p))
        cols.append(idx)
        vals.append(np.exp(-d2 / grid.sigma**2))
    Pi = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(len(grid), space.n_dofs))
    return (Pi @ space.M).tocsr()


# ---------------------------------------------------------------------------
# ensemble
# ---------------------------------------------------------------------------

class RunningMoments:
    """Mean and centered second moment, merged chunk by chunk (Chan et al. update)."""

    def __init__(self, shape):
        self.n = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    def add_chunk(self, x: np.ndarray) -> None:
        """``x`` has realizations along axis 0."""
        nb = len(x)
        if nb == 0:
            return
        mb = x.mean(0)
        m2b = ((x - mb) ** 2).sum(0)
        n = self.n + nb
        d = mb - self.mean
        self.mean = self.mean + d * (nb / n)
        self.m2 = self.m2 + m2b + d**2 * (self.n * nb / n)
        self.n = n

    @property
    def var(self) -> np.ndarray:
        if self.n < 2:
            raise ValueError("need at least two samples")
        return self.m2 / (self.n - 1)


@dataclass
class McEnsemble:
    samples: np.ndarray          # (n_mc, n_points) projections
    streams: np.ndarray
    grid: ProbeGrid
    base_seed: int
    delta: float
    mean: np.ndarray
    std: np.ndarray
    reference: np.ndarray | None = None   # clean-data projections

    @property
    def n_mc(self) -> int:
        return len(self.streams)


def _clean_projection(system: SystemMatrix, data, P) -> np.ndarray:
    space = system.space
    u = system.solve(system.state_rhs(data))
    v = system.solve_adjoint(-2.0 * (space.M @ u.imag))
    return P @ (u.imag * v.real - u.real * v.imag)


def _realizations(system: SystemMatrix, data, P, F: np.ndarray) -> np.ndarray:
    """Projections for the Dirichlet traces in the columns of ``F``; returns (k, n_points)."""
    M = system.space.M
    U = system.solve(system.state_rhs_batch(data.g, F))
    V = system.solve_adjoint(-2.0 * (M @ U.imag))
    dJ = U.imag * V.real - U.real * V.imag
    return np.asarray((P @ dJ).T)


def mc_run(scenario, n_mc: int, grid: ProbeGrid, base_seed: int, delta: float = 0.1,
           chunk: int = 25, workers: int = 1, system: SystemMatrix | None = None,
           keep_samples: bool = True) -> McEnsemble:
    """Ensemble of projected gradients under additive boundary noise.

    Realization ``k`` perturbs the measured trace with stream ``k`` of
    ``base_seed``. One factorization serves every solve; realizations are
    grouped into chunks of right-hand sides. Results do not depend on
    ``workers`` or ``chunk``: samples are stored per stream and reduced in
    stream order.
    """
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2")
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    system = system or assemble_ccbm(scenario.mesh, None, scenario.beta, scenario.degree)
    space = system.space
    data = scenario.data
    P = probe_matrix(space, grid)
    model = NoiseModel(ADDITIVE, delta, base_seed)
    streams = np.arange(n_mc)
    bounds = [(a, min(a + chunk, n_mc)) for a in range(0, n_mc, chunk)]

    def work(ab):
        a, b = ab
        F = np.column_stack([perturb_boundary(data.f, model, int(k)) for k in streams[a:b]])
        try:
            return _realizations(system, data, P, F)
        except SolverFailure:
            for j, k in enumerate(streams[a:b]):
                try:
                    _realizations(system, data, P, F[:, j:j + 1])
                except SolverFailure as exc:
                    raise SolverFailure(f"stream {int(k)}: {exc}") from exc
            raise
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(work, bounds))
    else:
        parts = [work(ab) for ab in bounds]
    # reduce in stream order with a fixed block size so bits do not depend on chunking
    samples = np.vstack(parts)
    mom = RunningMoments(len(grid))
    for a in range(0, n_mc, 25):
        mom.add_chunk(samples[a:a + 25])
    ref = _clean_projection(system, data, P)
    return McEnsemble(samples if keep_samples else np.zeros((0, len(grid))), streams, grid, int(base_seed),
                      float(delta), mom.mean, np.sqrt(mom.var), ref)


# ---------------------------------------------------------------------------
# confidence map
# ---------------------------------------------------------------------------

@dataclass
class ConfidenceMap:
    points: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    reject_h0: np.ndarray
    red_zone: np.ndarray
    alpha: float
    n_mc: int
    z: float = field(default=0.0)

    @property
    def red_centroid(self) -> np.ndarray:
        return self.points[self.red_zone].mean(0)

    def to_dict(self) -> dict:
        rej = self.reject_h0
        out = {"alpha": self.alpha, "z": self.z, "n_mc": self.n_mc, "n_points": int(len(self.points)),
               "n_rejected": int(rej.sum()), "n_red": int(self.red_zone.sum()),
               "global_min_mean": float(self.mean.min()),
               "argmin": [float(c) for c in self.points[np.argmin(self.mean)]]}
        if self.red_zone.any():
            out["red_centroid"] = [float(c) for c in self.red_centroid]
        return out

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("x,y,mean,std,ci_lo,ci_hi,reject,red\n")
            for i in range(len(self.points)):
                fh.write(f"{float(self.points[i, 0])!r},{float(self.points[i, 1])!r},{float(self.mean[i])!r},{float(self.std[i])!r},"
                         f"{float(self.ci_lower[i])!r},{float(self.ci_upper[i])!r},{int(self.reject_h0[i])},"
                         f"{int(self.red_zone[i])}\n")

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_svg(self, path, grid: ProbeGrid, bounds, truth=None) -> None:
        from .topograd import _draw_truth
        cv = SvgCanvas(bounds)
        half = 0.5 * (bounds[1] - bounds[0]) / grid.n_scan
        for p, rej, red in zip(self.points, self.reject_h0, self.red_zone):
            if red:
                cv.rect(p, half, "red", 0.9)
            elif rej:
                cv.rect(p, half, "lightblue", 0.9)
        if truth is not None:
            _draw_truth(cv, truth)
        cv.circle(self.points[np.argmin(self.mean)], 4, "magenta")
        cv.frame()
        cv.save(path)


def critical_value(alpha: float) -> float:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return float(norm.ppf(1 - alpha / 2))


def ci_from_moments(points, mean, std, n_mc: int, alpha: float = 0.05) -> ConfidenceMap:
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2")
    z = critical_value(alpha)
    half = z * np.asarray(std) / np.sqrt(n_mc)
    lo, hi = mean - half, mean + half
    rej = hi < 0
    return ConfidenceMap(np.asarray(points), np.asarray(mean), np.asarray(std), lo, hi, rej,
                         np.zeros_like(rej), float(alpha), int(n_mc), z)


def ci_map(ensemble: McEnsemble, alpha: float = 0.05) -> ConfidenceMap:
    """``mean +- z s / sqrt(N)`` per probe; H0 is rejected where the upper bound is negative."""
    return ci_from_moments(ensemble.grid.points, ensemble.mean, ensemble.std, ensemble.n_mc, alpha)


def red_zone(cmap: ConfidenceMap, fraction: float = 0.05) -> ConfidenceMap:
    """Rejected points whose mean lies within ``fraction * |min mean|`` of the minimum."""
    if not cmap.reject_h0.any():
        raise NoRejection("no point rejects H0")
    if fraction < 0:
        raise ValueError("fraction must be nonnegative")
    m = cmap.mean[cmap.reject_h0].min()
    red = cmap.reject_h0 & (cmap.mean <= m + fraction * abs(m))
    return replace(cmap, red_zone=red)


# ---------------------------------------------------------------------------
# convergence
# ---------------------------------------------------------------------------

@dataclass
class Convergence:
    n: np.ndarray
    err: np.ndarray      # averaged over the chosen probes
    slope: float
    probes: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("n,err\n")
            for n, e in zip(self.n, self.err):
                fh.write(f"{n},{float(e)!r}\n")


def default_probes(n_points: int, count: int = 10) -> np.ndarray:
    """``count`` probe indices spread evenly over the flattened grid."""
    return np.unique(np.linspace(0, n_points - 1, min(count, n_points)).round().astype(int))


def convergence_diagnostic(ensemble: McEnsemble, reference: np.ndarray | None = None,
                           probes=None, n_min: int = 10) -> Convergence:
    """Running-mean error ``Err(n)`` averaged over probes and its log-log slope on ``n >= n_min``."""
    if ensemble.samples.shape[0] != ensemble.n_mc:
        raise ValueError("ensemble was run without keep_samples")
    ref = ensemble.reference if reference is None else np.asarray(reference)
    probes = default_probes(len(ensemble.grid)) if probes is None else np.asarray(probes)
    S = ensemble.samples[:, probes]
    n = np.arange(1, len(S) + 1)
    running = np.cumsum(S, axis=0) / n[:, None]
    err = np.abs(running - ref[probes]).mean(1)
    sel = n >= n_min
    if sel.sum() < 2 or np.any(err[sel] <= 0):
        slope = float("nan")
    else:
        slope = float(np.polyfit(np.log(n[sel]), np.log(err[sel]), 1)[0])
    return Convergence(n, err, slope, probes)
