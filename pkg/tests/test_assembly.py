import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccbm.assembly import (CauchyData, ComplexField, ExtensionSolver, assemble_ccbm, cost_J, fe_space,
                           interface_pairing, solve_neumann, solve_sobolev_extension, solve_state,
                           solve_topo_adjoint)
from ccbm.errors import MeshMismatch
from ccbm.mesh import Disc, InclusionSpec, Square, build_rect_mesh, deform_mesh, mark_region


def _harmonic(p):
    # xy + Re(z^4); its normal flux is continuous around the corners of the square
    x, y = p[:, 0], p[:, 1]
    return x * y + x**4 - 6 * x**2 * y**2 + y**4


def _harmonic_flux(p):
    x, y = p[:, 0], p[:, 1]
    ux = y + 4 * x**3 - 12 * x * y**2
    uy = x + 4 * y**3 - 12 * x**2 * y
    g = np.zeros(len(p))
    g = np.where(np.isclose(y, -0.5), -uy, g)
    g = np.where(np.isclose(y, 0.5), uy, g)
    g = np.where(np.isclose(x, -0.5), -ux, g)
    g = np.where(np.isclose(x, 0.5), ux, g)
    return g


def _harmonic_data(space):
    pts = space.points[space.boundary_dofs]
    return CauchyData.on(space, _harmonic_flux(pts), _harmonic(pts))


def _l2_error_vs_p2(mesh, uh):
    """L2 error of a P1 field against the P2 interpolant of the exact solution."""
    s2 = fe_space(mesh, 2)
    e = mesh.edges
    up2 = np.concatenate([uh, 0.5 * (uh[e[:, 0]] + uh[e[:, 1]])])
    d = up2 - s2.interpolate(_harmonic)
    return np.sqrt(d @ (s2.M @ d))


def test_mass_and_stiffness_identities():
    for deg in (1, 2):
        s = fe_space(build_rect_mesh(5, 4), deg)
        one = np.ones(s.n_dofs)
        assert one @ s.M @ one == pytest.approx(1.0)
        np.testing.assert_allclose(s.K @ one, 0.0, atol=1e-12)
        assert one @ s.B @ one == pytest.approx(4.0)
        x = s.points[:, 0]
        assert x @ s.K @ x == pytest.approx(1.0)


def test_p2_mass_integrates_quadratics():
    s = fe_space(build_rect_mesh(3, 3), 2)
    x = s.points[:, 0]
    assert (x * x) @ s.M @ np.ones(s.n_dofs) == pytest.approx(1.0 / 12.0)


def test_ccbm_p1_convergence_rate():
    errs, hs, ims = [], [], []
    for n in (8, 16, 32, 64):
        mesh = build_rect_mesh(n, n)
        s = fe_space(mesh, 1)
        u = solve_state(mesh, None, 10.0, _harmonic_data(s))
        errs.append(_l2_error_vs_p2(mesh, u.re))
        hs.append(1.0 / n)
        ims.append(np.abs(u.im).max())
    assert np.all(np.diff(ims) < 0)
    rate = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert 1.7 <= rate <= 2.3


def test_p2_is_more_accurate_than_p1():
    mesh = build_rect_mesh(16, 16)
    s1, s2 = fe_space(mesh, 1), fe_space(mesh, 2)
    u1 = solve_state(mesh, None, 10.0, _harmonic_data(s1))
    u2 = solve_state(mesh, None, 10.0, _harmonic_data(s2), degree=2)
    e1 = np.abs(u1.re - _harmonic(s1.points)).max()
    e2 = np.abs(u2.re - _harmonic(s2.points)).max()
    assert e2 < 0.1 * e1


def test_exact_data_give_vanishing_imaginary_part():
    mesh = build_rect_mesh(40, 40)
    spec = InclusionSpec([Disc((0.1, 0.0), 0.15)], mu0=10.0)
    s = fe_space(mesh, 1)
    g = np.ones(len(s.boundary_dofs))
    u = solve_neumann(mesh, spec, g)
    data = CauchyData.on(s, g, u[s.boundary_dofs])
    w = solve_state(mesh, spec, 200.0, data)
    assert np.abs(w.im).max() <= 1e-8 * np.abs(w.re).max()
    assert cost_J(w.im, mesh) < 1e-16 * cost_J(w.re, mesh) + 1e-30


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.5, 500.0))
def test_block_solve_matches_complex_system(seed, beta):
    mesh = mark_region(build_rect_mesh(6, 6), InclusionSpec([Square((0.0, 0.0), 0.2)]))
    sysm = assemble_ccbm(mesh, 10.0, beta)
    rng = np.random.default_rng(seed)
    r = rng.normal(size=sysm.n) + 1j * rng.normal(size=sysm.n)
    z = sysm.solve(r)
    np.testing.assert_allclose(sysm.apply(z), r, atol=1e-9 * np.abs(r).max())
    w = sysm.solve_adjoint(r)
    np.testing.assert_allclose(sysm.P @ w - 1j * (sysm.Q @ w), r, atol=1e-9 * np.abs(r).max())


def test_adjoint_duality():
    # the adjoint solve inverts the Hermitian transpose: <y, A x> = <A^H y, x>
    mesh = build_rect_mesh(10, 10)
    sysm = assemble_ccbm(mesh, None, 50.0)
    rng = np.random.default_rng(3)
    a = rng.normal(size=sysm.n) + 1j * rng.normal(size=sysm.n)
    b = rng.normal(size=sysm.n) + 1j * rng.normal(size=sysm.n)
    x = sysm.solve(a)
    y = sysm.solve_adjoint(b)
    assert np.vdot(y, a) == pytest.approx(np.vdot(b, x), rel=1e-10)


def test_topo_adjoint_size_check():
    mesh = build_rect_mesh(4, 4)
    with pytest.raises(MeshMismatch):
        solve_topo_adjoint(mesh, None, 1.0, np.zeros(3))


def test_state_rejects_foreign_data():
    m1, m2 = build_rect_mesh(4, 4), build_rect_mesh(5, 5)
    data = CauchyData.on(fe_space(m2, 1), 1.0, 0.0)
    with pytest.raises(MeshMismatch):
        solve_state(m1, None, 1.0, data)


def test_trivial_data_rejected():
    with pytest.raises(ValueError):
        CauchyData.on(fe_space(build_rect_mesh(3, 3), 1), 0.0, 0.0)


def test_beta_must_be_positive():
    with pytest.raises(ValueError):
        assemble_ccbm(build_rect_mesh(3, 3), None, 0.0)


def test_complex_field_length_check():
    with pytest.raises(ValueError):
        ComplexField(np.zeros(3), np.zeros(4), 1)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.1, 10.0))
def test_cost_scales_quadratically(lam):
    mesh = build_rect_mesh(12, 12)
    spec = InclusionSpec([Disc((0.0, 0.0), 0.15)])
    s = fe_space(mesh, 1)
    data = CauchyData.on(s, 1.0, 0.3 * s.points[s.boundary_dofs, 0])
    sysm = assemble_ccbm(mesh, None, 20.0)
    j1 = cost_J(solve_state(mesh, spec, 20.0, data, system=sysm).im, mesh)
    j2 = cost_J(solve_state(mesh, spec, 20.0, data.scaled(lam), system=sysm).im, mesh)
    assert j2 == pytest.approx(lam**2 * j1, rel=1e-9)


def test_extension_satisfies_riesz_identity():
    mesh = mark_region(build_rect_mesh(20, 20), InclusionSpec([Disc((0.0, 0.0), 0.2)]))
    iface = mesh.interface()
    G = np.cos(3 * mesh.vertices[:, 0]) + mesh.vertices[:, 1]
    solver = ExtensionSolver(mesh)
    th = solve_sobolev_extension(mesh, iface, G, solver)
    assert np.all(th[mesh.boundary_vertices] == 0)
    # (th, th)_H1 = -<G n, th>
    assert solver.norm2(th) == pytest.approx(-interface_pairing(iface, G, th), rel=1e-10)


def test_stiffness_invariant_under_rigid_motion():
    mesh = build_rect_mesh(6, 6)
    X = mesh.vertices
    c, s = np.cos(0.3), np.sin(0.3)
    rot = X @ np.array([[c, s], [-s, c]]) * 0.5 - X
    moved = deform_mesh(mesh, rot, 1.0)
    for deg in (1, 2):
        np.testing.assert_allclose(fe_space(moved, deg).K.toarray(), fe_space(mesh, deg).K.toarray(), atol=1e-12)
