import pytest

from ccbm.config import load_config, parse_config, set_seed
from ccbm.errors import ConfigError
from ccbm.forward import ADDITIVE
from ccbm.mesh import Disc, Square

FULL = """
bounds: [-0.5, 0.5, -0.5, 0.5]
mesh:
  fine: [80, 80]
  fine_degree: 2
  coarse: 40
truth:
  - square: {center: [-0.25, 0.0], half_width: 0.1}
  - square: {center: [0.25, 0.0], half_width: 0.1}
mu0: 100
g_profile: abs-x
beta: 50
noise: {kind: additive-boundary, delta: 0.05, seed: 3}
topo: {ring_depth: 3, n_levels: 20, min_persistence: 0.0}
stat: {n_mc: 50, n_scan: 10, delta: [0.01, 0.1], alpha: 0.1}
shape:
  betas: [1, 200]
  init:
    - disc: {center: [0, 0], radius: 0.3}
output: {dir: results, render: true}
"""


def test_defaults():
    cfg = parse_config("", env={})
    assert cfg.mesh.fine == (200, 200) and cfg.mesh.coarse == (100, 100)
    assert cfg.mu0 == 10.0 and cfg.beta == 200.0
    spec = cfg.truth_spec()
    assert spec.shapes == (Disc((0.0, 0.0), 0.1),)
    assert cfg.stat.delta == [0.1] and not cfg.stat.delta_is_list
    assert cfg.shape.betas == [200.0]
    assert cfg.init_spec() is None


def test_full_document():
    cfg = parse_config(FULL, env={})
    assert cfg.mesh.coarse == (40, 40)
    assert cfg.truth_spec().shapes[1] == Square((0.25, 0.0), 0.1)
    assert cfg.truth_spec().mu0 == 100.0
    assert cfg.noise.kind == ADDITIVE and cfg.noise.seed == 3
    assert cfg.topo.ring_depth == 3
    assert cfg.stat.delta == [0.01, 0.1] and cfg.stat.delta_is_list
    assert cfg.shape.betas == [1.0, 200.0]
    assert cfg.init_spec().shapes == (Disc((0.0, 0.0), 0.3),)
    assert cfg.out_dir == "results" and cfg.render
    d = cfg.to_dict()
    assert d["mesh"]["fine"] == [80, 80]


@pytest.mark.parametrize("text, field, line", [
    ("mu0: -1\n", "mu0", 1),
    ("mesh:\n  fine: [10, 10]\n  coarse: [10, 10]\n  fine_degree: 1\n", "mesh", 1),
    ("stat:\n  n_mc: 1\n", "stat.n_mc", 2),
    ("stat:\n  alpha: 1.5\n", "stat.alpha", 2),
    ("noise:\n  kind: speckle\n", "noise.kind", 2),
    ("topo:\n  ring_depth: 0\n", "topo.ring_depth", 2),
    ("colour: red\n", "colour", 1),
    ("shape:\n  betas: []\n", "shape.betas", 2),
    ("truth: null\n", "truth", 1),
    ("truth:\n  - disc: {center: [0.45, 0], radius: 0.1}\n", "truth", 1),
    ("truth:\n  - disc: {center: [0, 0], radius: -1}\n", "truth[0].disc.radius", 2),
    ("truth:\n  - blob: {}\n", "truth[0]", 2),
    ("bounds: [0, 0, 0, 1]\n", "bounds", 1),
    ("truth: []\n", "truth", 1),
    ("mesh: {fine: [a, b]}\n", "mesh.fine", 1),
])
def test_errors_name_field_and_line(text, field, line):
    with pytest.raises(ConfigError) as ei:
        parse_config(text, env={})
    assert ei.value.field == field
    assert ei.value.line == line


def test_yaml_syntax_error_has_line():
    with pytest.raises(ConfigError) as ei:
        parse_config("mesh:\n  fine: [1, 2\n", env={})
    assert ei.value.line is not None


def test_top_level_must_be_mapping():
    with pytest.raises(ConfigError):
        parse_config("- 1\n- 2\n", env={})


def test_consistency_allows_empty_truth():
    cfg = parse_config("mesh: {fine: [10, 10], coarse: [10, 10], fine_degree: 1, consistency: true}\n"
                       "truth: null\n", env={})
    assert cfg.truth is None and cfg.truth_spec() is None


def test_env_overrides():
    cfg = parse_config("", env={"CCBM_SEED": "42", "CCBM_OUT": "/tmp/x"})
    assert cfg.noise.seed == 42 and cfg.stat.seed == 42
    assert cfg.out_dir == "/tmp/x"
    with pytest.raises(ConfigError):
        parse_config("", env={"CCBM_SEED": "abc"})


def test_set_seed():
    cfg = parse_config("", env={})
    set_seed(cfg, 9)
    assert cfg.stat.seed == 9
    with pytest.raises(ConfigError):
        set_seed(cfg, -1)


def test_load_config(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("mu0: 30\n")
    assert load_config(p, env={}).mu0 == 30.0
