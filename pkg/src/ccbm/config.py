"""
Scenario configuration: YAML text parsed into dataclasses with field and
line diagnostics, plus environment overrides for seeds and output paths.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
import yaml

from .errors import ConfigError
from .forward import ADDITIVE, MULTIPLICATIVE
from .mesh import UNIT_SQUARE, Disc, InclusionSpec, Square

ENV_SEED = "CCBM_SEED"
ENV_OUT = "CCBM_OUT"


@dataclass
class MeshConfig:
    fine: tuple[int, int] = (200, 200)
    fine_degree: int = 2
    coarse: tuple[int, int] = (100, 100)
    coarse_degree: int = 1
    consistency: bool = False


@dataclass
class NoiseConfig:
    kind: str = MULTIPLICATIVE
    delta: float = 0.0
    seed: int = 0


@dataclass
class TopoConfig:
    ring_depth: int = 2
    n_levels: int = 30
    min_persistence: float = 0.05


@dataclass
class StatConfig:
    n_mc: int = 100
    n_scan: int = 20
    alpha: float = 0.05
    sigma: float | None = None
    delta: list[float] = field(default_factory=lambda: [0.1])
    seed: int = 0
    chunk: int = 25
    red_fraction: float = 0.05
    delta_is_list: bool = False


@dataclass
class ShapeConfig:
    s: float = 0.5
    t0: float = 1e-6
    max_iters: int = 200
    quality_floor: float = 0.05
    stall_rtol: float = 1e-3
    stall_window: int = 5
    init: list[dict] | None = None
    from_topo: str | None = None
    betas: list[float] = field(default_factory=lambda: [200.0])


@dataclass
class ScenarioConfig:
    bounds: tuple[float, float, float, float] = UNIT_SQUARE
    mesh: MeshConfig = field(default_factory=MeshConfig)
    truth: list[dict] | None = field(default_factory=lambda: [{"disc": {"center": [0.0, 0.0], "radius": 0.1}}])
    mu0: float = 10.0
    g_profile: str = "one"
    beta: float = 200.0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    topo: TopoConfig = field(default_factory=TopoConfig)
    stat: StatConfig = field(default_factory=StatConfig)
    shape: ShapeConfig = field(default_factory=ShapeConfig)
    out_dir: str = "out"
    render: bool = False

    def truth_spec(self) -> InclusionSpec | None:
        if self.truth is None:
            return None
        return build_inclusion(self.truth, self.mu0, self.bounds, "truth")

    def init_spec(self) -> InclusionSpec | None:
        if self.shape.init is None:
            return None
        return build_inclusion(self.shape.init, self.mu0, self.bounds, "shape.init")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        d["mesh"]["fine"] = list(self.mesh.fine)
        d["mesh"]["coarse"] = list(self.mesh.coarse)
        return d


def build_inclusion(items: list[dict], mu0: float, bounds, where: str) -> InclusionSpec:
    shapes = []
    for i, item in enumerate(items):
        if "disc" in item:
            d = item["disc"]
            shapes.append(Disc(tuple(float(c) for c in d["center"]), float(d["radius"])))
        else:
            s = item["square"]
            shapes.append(Square(tuple(float(c) for c in s["center"]), float(s["half_width"])))
    try:
        return InclusionSpec(shapes, mu0=mu0, bounds=tuple(bounds))
    except ValueError as exc:
        raise ConfigError(where, str(exc)) from exc


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

class _Lines:
    """Maps dotted field paths to 1-based source lines."""

    def __init__(self, text: str):
        self.map: dict[str, int] = {}
        try:
            node = yaml.compose(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError("<document>", str(exc).split("\n")[0],
                              None if mark is None else mark.line + 1) from exc
        if node is not None:
            self._walk(node, "")

    def _walk(self, node, path):
        if path:
            self.map.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = f"{path}.{k.value}" if path else str(k.value)
                self.map.setdefault(key, k.start_mark.line + 1)
                self._walk(v, key)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, f"{path}[{i}]")

    def __call__(self, path: str) -> int | None:
        while path:
            if path in self.map:
                return self.map[path]
            path = path.rsplit(".", 1)[0] if "." in path else ""
        return None


class _Reader:
    def __init__(self, raw: dict, lines: _Lines, prefix: str = ""):
        self.raw = raw
        self.lines = lines
        self.prefix = prefix
        self.used: set[str] = set()

    def path(self, key):
        return f"{self.prefix}.{key}" if self.prefix else key

    def fail(self, key, msg):
        p = self.path(key)
        raise ConfigError(p, msg, self.lines(p))

    def get(self, key, default):
        self.used.add(key)
        return self.raw.get(key, default)

    def number(self, key, default, *, integer=False, positive=False, nonneg=False, lo=None, hi=None):
        v = self.get(key, default)
        if v is None:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(key, f"expected a number, got {v!r}")
        if integer:
            if isinstance(v, float) and not v.is_integer():
                self.fail(key, f"expected an integer, got {v!r}")
            v = int(v)
        else:
            v = float(v)
        if positive and not v > 0:
            self.fail(key, f"must be positive, got {v}")
        if nonneg and v < 0:
            self.fail(key, f"must be nonnegative, got {v}")
        if lo is not None and v < lo:
            self.fail(key, f"must be >= {lo}, got {v}")
        if hi is not None and v > hi:
            self.fail(key, f"must be <= {hi}, got {v}")
        return v

    def pair(self, key, default, integer=True):
        v = self.get(key, default)
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            v = [v, v]
        if not isinstance(v, (list, tuple)) or len(v) != 2:
            self.fail(key, f"expected two values, got {v!r}")
        try:
            out = tuple(int(x) if integer else float(x) for x in v)
        except (TypeError, ValueError):
            self.fail(key, f"expected numbers, got {v!r}")
        if integer and min(out) < 1:
            self.fail(key, "mesh sizes must be >= 1")
        return out

    def choice(self, key, default, options):
        v = self.get(key, default)
        if v not in options:
            self.fail(key, f"expected one of {sorted(options)}, got {v!r}")
        return v

    def flag(self, key, default):
        v = self.get(key, default)
        if not isinstance(v, bool):
            self.fail(key, f"expected true/false, got {v!r}")
        return v

    def sub(self, key) -> "_Reader":
        v = self.get(key, {})
        if v is None:
            v = {}
        if not isinstance(v, dict):
            self.fail(key, "expected a mapping")
        return _Reader(v, self.lines, self.path(key))

    def finish(self):
        extra = sorted(set(self.raw) - self.used)
        if extra:
            self.fail(extra[0], "unknown field")


def _shapes(r: _Reader, key: str, required: bool):
    items = r.get(key, None)
    if items is None:
        if required:
            r.fail(key, "missing inclusion shapes")
        return None
    if not isinstance(items, list) or not items:
        r.fail(key, "expected a nonempty list of shapes")
    out = []
    for i, item in enumerate(items):
        k = f"{key}[{i}]"
        if not isinstance(item, dict) or len(item) != 1 or next(iter(item)) not in ("disc", "square"):
            r.fail(k, "each shape is {disc: {center, radius}} or {square: {center, half_width}}")
        kind, body = next(iter(item.items()))
        size_key = "radius" if kind == "disc" else "half_width"
        if not isinstance(body, dict) or "center" not in body or size_key not in body:
            r.fail(f"{k}.{kind}", f"needs center and {size_key}")
        c = body["center"]
        if not isinstance(c, list) or len(c) != 2 or not all(isinstance(x, (int, float)) for x in c):
            r.fail(f"{k}.{kind}.center", f"expected [x, y], got {c!r}")
        sz = body[size_key]
        if isinstance(sz, bool) or not isinstance(sz, (int, float)) or not sz > 0:
            r.fail(f"{k}.{kind}.{size_key}", f"must be a positive number, got {sz!r}")
        out.append({kind: {"center": [float(x) for x in c], size_key: float(sz)}})
    return out


def parse_config(text: str, env: dict | None = None) -> ScenarioConfig:
    """Parse YAML text; every field is optional and defaults to the reference setup."""
    lines = _Lines(text)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:  # pragma: no cover - compose already caught it
        raise ConfigError("<document>", str(exc)) from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("<document>", "top level must be a mapping", 1)
    r = _Reader(raw, lines)
    cfg = ScenarioConfig()
    b = r.get("bounds", list(UNIT_SQUARE))
    if not isinstance(b, list) or len(b) != 4 or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in b):
        r.fail("bounds", "expected [xmin, xmax, ymin, ymax]")
    cfg.bounds = tuple(float(x) for x in b)
    if not (cfg.bounds[0] < cfg.bounds[1] and cfg.bounds[2] < cfg.bounds[3]):
        r.fail("bounds", "empty rectangle")

    m = r.sub("mesh")
    cfg.mesh = MeshConfig(m.pair("fine", [200, 200]), m.choice("fine_degree", 2, {1, 2}),
                          m.pair("coarse", [100, 100]), m.choice("coarse_degree", 1, {1, 2}),
                          m.flag("consistency", False))
    m.finish()
    if (not cfg.mesh.consistency and cfg.mesh.fine == cfg.mesh.coarse
            and cfg.mesh.fine_degree == cfg.mesh.coarse_degree):
        r.fail("mesh", "forward and inverse discretizations coincide; set consistency: true")

    if "truth" in raw and raw["truth"] is None:
        r.get("truth", None)
        if not cfg.mesh.consistency:
            r.fail("truth", "an empty truth is only allowed with mesh.consistency")
        cfg.truth = None
    else:
        cfg.truth = _shapes(r, "truth", required=True) if "truth" in raw else cfg.truth
    cfg.mu0 = r.number("mu0", 10.0, positive=True)
    cfg.g_profile = r.choice("g_profile", "one", {"one", "abs-x"})
    cfg.beta = r.number("beta", 200.0, positive=True)

    n = r.sub("noise")
    cfg.noise = NoiseConfig(n.choice("kind", MULTIPLICATIVE, {MULTIPLICATIVE, ADDITIVE}),
                            n.number("delta", 0.0, nonneg=True), n.number("seed", 0, integer=True, nonneg=True))
    n.finish()

    t = r.sub("topo")
    cfg.topo = TopoConfig(t.number("ring_depth", 2, integer=True, lo=1), t.number("n_levels", 30, integer=True, lo=2),
                          t.number("min_persistence", 0.05, nonneg=True))
    t.finish()

    s = r.sub("stat")
    n_mc = s.number("n_mc", 100, integer=True)
    if n_mc < 2:
        s.fail("n_mc", f"needs at least 2 realizations for a variance, got {n_mc}")
    dl = s.get("delta", 0.1)
    is_list = isinstance(dl, list)
    deltas = dl if is_list else [dl]
    if not deltas or any(isinstance(x, bool) or not isinstance(x, (int, float)) or x < 0 for x in deltas):
        s.fail("delta", f"expected a nonnegative number or list, got {dl!r}")
    cfg.stat = StatConfig(n_mc, s.number("n_scan", 20, integer=True, lo=1),
                          s.number("alpha", 0.05, positive=True, hi=0.999999),
                          s.number("sigma", None, positive=True), [float(x) for x in deltas],
                          s.number("seed", 0, integer=True, nonneg=True), s.number("chunk", 25, integer=True, lo=1),
                          s.number("red_fraction", 0.05, nonneg=True), is_list)
    s.finish()

    h = r.sub("shape")
    betas = h.get("betas", None)
    if betas is None:
        betas = [cfg.beta]
    if not isinstance(betas, list) or not betas or any(
            isinstance(x, bool) or not isinstance(x, (int, float)) or not x > 0 for x in betas):
        h.fail("betas", f"expected a nonempty list of positive numbers, got {betas!r}")
    cfg.shape = ShapeConfig(h.number("s", 0.5, positive=True), h.number("t0", 1e-6, positive=True),
                            h.number("max_iters", 200, integer=True, lo=1),
                            h.number("quality_floor", 0.05, nonneg=True, hi=0.99),
                            h.number("stall_rtol", 1e-3, nonneg=True), h.number("stall_window", 5, integer=True, lo=1),
                            _shapes(h, "init", required=False), h.get("from_topo", None),
                            [float(x) for x in betas])
    h.finish()

    o = r.sub("output")
    cfg.out_dir = str(o.get("dir", "out"))
    cfg.render = o.flag("render", False)
    o.finish()
    r.finish()

    # validate geometry now so errors carry the field name and line
    try:
        cfg.truth_spec()
        cfg.init_spec()
    except ConfigError as exc:
        raise ConfigError(exc.field, exc.message, lines(exc.field)) from exc
    apply_env(cfg, os.environ if env is None else env)
    return cfg


def apply_env(cfg: ScenarioConfig, env) -> None:
    if env.get(ENV_SEED):
        try:
            seed = int(env[ENV_SEED])
        except ValueError as exc:
            raise ConfigError(ENV_SEED, f"not an integer: {env[ENV_SEED]!r}") from exc
        set_seed(cfg, seed)
    if env.get(ENV_OUT):
        cfg.out_dir = env[ENV_OUT]


def set_seed(cfg: ScenarioConfig, seed: int) -> None:
    if seed < 0:
        raise ConfigError("seed", "must be nonnegative")
    cfg.noise.seed = seed
    cfg.stat.seed = seed


def load_config(path, env: dict | None = None) -> ScenarioConfig:
    with open(path) as fh:
        return parse_config(fh.read(), env)
