"""Command-line front end: ``ccbm {forward,topo,stat,shape,all} --config FILE``."""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ScenarioConfig, load_config, parse_config, set_seed
from .errors import (CCBMError, ConfigError, InvertedElement, NoMinima, NoNegativeMinimum, NoRejection,
                     SolverFailure, StepTooSmall)
from .forward import NoiseModel, build_scenario, write_cauchy_csv
from .mesh import write_vtk
from .shape_opt import (ShapeOptConfig, boundary_profile_clusters, compare_beta, init_from_detection,
                        init_from_topo_json, interface_error)
from .stat_detect import ci_map, convergence_diagnostic, mc_run, probe_grid, red_zone
from .topograd import one_shot_detect

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_NO_DETECTION = 4


class Job:
    """Output directory plus the list of files written, for the manifest."""

    def __init__(self, cfg: ScenarioConfig, command: str, out: Path, threads: int = 1):
        self.cfg = cfg
        self.command = command
        self.out = out
        self.threads = threads
        self.files: list[Path] = []
        out.mkdir(parents=True, exist_ok=True)
        self._cache: dict = {}

    def path(self, name: str, sub: str | None = None) -> Path:
        d = self.out / sub if sub else self.out
        d.mkdir(parents=True, exist_ok=True)
        p = d / name
        self.files.append(p)
        return p

    def scenario(self, beta: float | None = None, noise: bool = True):
        cfg = self.cfg
        nz = None
        if noise and cfg.noise.delta > 0:
            nz = NoiseModel(cfg.noise.kind, cfg.noise.delta, cfg.noise.seed)
        return build_scenario(cfg.truth_spec(), cfg.g_profile, beta=cfg.beta if beta is None else beta,
                              mu0=cfg.mu0, fine=cfg.mesh.fine, coarse=cfg.mesh.coarse,
                              fine_degree=cfg.mesh.fine_degree, coarse_degree=cfg.mesh.coarse_degree,
                              noise=nz, consistency=cfg.mesh.consistency, bounds=cfg.bounds,
                              fine_cache=self._cache)

    def write_manifest(self, extra: dict | None = None) -> Path:
        files = {}
        for p in sorted(set(self.files)):
            files[str(p.relative_to(self.out))] = hashlib.sha256(p.read_bytes()).hexdigest()
        man = {
            "command": self.command,
            "config": self.cfg.to_dict(),
            "seeds": {"noise": self.cfg.noise.seed, "stat": self.cfg.stat.seed},
            "versions": {"ccbm": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "files": files,
        }
        if extra:
            man["results"] = extra
        p = self.out / "manifest.json"
        with open(p, "w") as fh:
            json.dump(man, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return p


def _dump(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_forward(job: Job, sub: str | None = None) -> dict:
    sc = job.scenario()
    write_cauchy_csv(job.path("cauchy.csv", sub), sc.data)
    key = next(iter(job._cache), None)
    if key is not None:
        fmesh, fdata, u = job._cache[key]
        write_cauchy_csv(job.path("cauchy_forward.csv", sub), fdata)
        write_vtk(fmesh, job.path("forward_field.vtk", sub), point_data={"u": u[:fmesh.n_vertices]})
    return {"n_boundary": int(len(sc.data.f)), "f_min": float(sc.data.f.min()), "f_max": float(sc.data.f.max())}


def cmd_topo(job: Job, sub: str | None = None):
    cfg = job.cfg
    sc = job.scenario()
    t = cfg.topo
    res = one_shot_detect(sc, t.ring_depth, t.n_levels, t.min_persistence)
    res.write_json(job.path("detection.json", sub))
    res.write_csv(job.path("topo_field.csv", sub))
    if cfg.render:
        res.write_svg(job.path("detection.svg", sub), truth=sc.truth)
    return {"center": [float(c) for c in res.center_estimate], "n_minima": len(res.minima),
            "argmin": [float(c) for c in res.field.argmin_point]}, res, sc


def cmd_stat(job: Job, sub: str | None = None) -> dict:
    cfg = job.cfg
    st = cfg.stat
    sc = job.scenario()
    grid = probe_grid(st.n_scan, cfg.bounds, st.sigma)
    summary = {}
    any_red = False
    for delta in st.delta:
        d_sub = f"delta_{delta:g}" if st.delta_is_list else None
        where = "/".join(x for x in (sub, d_sub) if x) or None
        ens = mc_run(sc, st.n_mc, grid, st.seed, delta, chunk=st.chunk, workers=job.threads)
        cmap = ci_map(ens, st.alpha)
        try:
            cmap = red_zone(cmap, st.red_fraction)
            any_red = True
        except NoRejection:
            pass
        cmap.write_csv(job.path("confidence_map.csv", where))
        cmap.write_json(job.path("confidence_map.json", where))
        conv = convergence_diagnostic(ens)
        conv.write_csv(job.path("convergence.csv", where))
        if cfg.render:
            cmap.write_svg(job.path("confidence_map.svg", where), grid, cfg.bounds, truth=sc.truth)
        d = cmap.to_dict()
        d["slope"] = conv.slope
        summary[f"{delta:g}"] = d
    _dump(job.path("stat_summary.json", sub), summary)
    if not any_red:
        raise NoRejection("no probe rejects H0 at any noise level")
    return summary


def _shape_init(job: Job, sc, sub: str | None):
    cfg = job.cfg
    init = cfg.init_spec()
    h = (cfg.bounds[1] - cfg.bounds[0]) / cfg.mesh.coarse[0]
    if init is not None:
        return init
    if cfg.shape.from_topo:
        return init_from_topo_json(cfg.shape.from_topo, cfg.mu0, cfg.bounds, h, sc.data)
    _, res, _ = cmd_topo(job, sub)
    n = len(res.minima)
    c = len(boundary_profile_clusters(sc.data, cfg.bounds))
    if c:
        n = min(n, c)
    return init_from_detection([m.point for m in res.minima], res.radius_estimate, cfg.mu0, cfg.bounds, h, n)


def cmd_shape(job: Job, sub: str | None = None) -> dict:
    cfg = job.cfg
    sh = cfg.shape
    sc = job.scenario()
    init = _shape_init(job, sc, sub)
    base = ShapeOptConfig(cfg.beta, sh.s, sh.t0, sh.max_iters, sh.quality_floor, sh.stall_rtol, sh.stall_window)
    runs = compare_beta(sc, init, sh.betas, base, workers=job.threads)
    table = {}
    for beta, hist in runs.items():
        b_sub = "/".join(x for x in (sub, f"beta_{beta:g}" if len(runs) > 1 else None) if x) or None
        hist.write_csv(job.path("history.csv", b_sub))
        hist.write_polyline_csv(job.path("interface.csv", b_sub))
        if cfg.render:
            hist.write_svg(job.path("overlay.svg", b_sub), truth=sc.truth)
        row = {"iterations": hist.n_iters, "initial_J": hist.initial_J, "final_J": hist.final_J,
               "stop": hist.stop_reason}
        if sc.truth is not None:
            row["interface_error"] = interface_error(hist.mesh, sc.truth)
        table[f"{beta:g}"] = row
    _dump(job.path("shape_summary.json", sub), table)
    return table


def cmd_all(job: Job) -> dict:
    out = {"forward": cmd_forward(job, "forward")}
    try:
        out["topo"] = cmd_topo(job, "topo")[0]
    except (NoNegativeMinimum, NoMinima) as exc:
        out["topo"] = {"error": str(exc)}
    try:
        out["stat"] = cmd_stat(job, "stat")
    except NoRejection as exc:
        out["stat"] = {"error": str(exc)}
    out["shape"] = cmd_shape(job, "shape")
    return out


COMMANDS = {"forward": cmd_forward, "topo": lambda j: cmd_topo(j)[0], "stat": cmd_stat,
            "shape": cmd_shape, "all": cmd_all}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccbm", description="Contact-region identification from boundary data.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="YAML scenario file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="seed for noise and Monte-Carlo streams")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads for ensembles and beta sweeps")
    p.add_argument("--render", action="store_true", help="also write SVG figures")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else parse_config("")
        if args.seed is not None:
            set_seed(cfg, args.seed)
        if args.out is not None:
            cfg.out_dir = str(args.out)
        if args.render:
            cfg.render = True
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    job = Job(cfg, args.command, Path(cfg.out_dir), args.threads)
    try:
        result = COMMANDS[args.command](job)
    except (NoNegativeMinimum, NoMinima, NoRejection) as exc:
        job.write_manifest({"error": str(exc)})
        print(f"no contact detected: {exc}", file=sys.stderr)
        return EXIT_NO_DETECTION
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverFailure, InvertedElement, StepTooSmall, CCBMError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    job.write_manifest(result)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_entry()
