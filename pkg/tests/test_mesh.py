import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccbm.errors import GeometryMismatch, InvertedElement
from ccbm.mesh import (Disc, EmptyRegionWarning, InclusionSpec, Square, build_rect_mesh, deform_mesh,
                       mark_region, min_triangle_quality, read_mesh, region_area, write_mesh, write_vtk)


def test_rect_mesh_counts_and_area():
    m = build_rect_mesh(4, 3)
    assert m.n_vertices == 5 * 4
    assert m.n_triangles == 2 * 4 * 3
    assert np.all(m.signed_areas > 0)
    assert m.signed_areas.sum() == pytest.approx(1.0)
    assert len(m.boundary_edges) == 2 * (4 + 3)


def test_boundary_loop_is_closed_and_counter_clockwise():
    m = build_rect_mesh(5, 5)
    e = m.boundary_edges
    assert np.array_equal(e[1:, 0], e[:-1, 1])
    assert e[-1, 1] == e[0, 0]
    p = m.vertices[e[:, 0]]
    shoelace = 0.5 * np.sum(p[:, 0] * np.roll(p[:, 1], -1) - np.roll(p[:, 0], -1) * p[:, 1])
    assert shoelace == pytest.approx(1.0)


def test_boundary_normals_point_outward():
    m = build_rect_mesh(6, 6)
    mid = m.vertices[m.boundary_edges].mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", m.boundary_normals, mid) > 0)


def test_inclusion_must_be_inside_domain():
    with pytest.raises(ValueError):
        InclusionSpec([Disc((0.45, 0.0), 0.1)])
    with pytest.raises(ValueError):
        InclusionSpec([Square((0.0, 0.0), 0.0)])
    with pytest.raises(ValueError):
        InclusionSpec([Disc((0.0, 0.0), 0.1)], mu0=0.0)


def test_mark_region_area_converges():
    spec = InclusionSpec([Disc((0.0, 0.0), 0.2)])
    a = [region_area(mark_region(build_rect_mesh(n, n), spec)) for n in (20, 80)]
    exact = np.pi * 0.04
    assert abs(a[1] - exact) < abs(a[0] - exact) or abs(a[1] - exact) < 2e-3
    assert a[1] == pytest.approx(exact, rel=0.03)


def test_mark_region_empty_warns():
    spec = InclusionSpec([Disc((0.01, 0.01), 0.004)])
    with pytest.warns(EmptyRegionWarning):
        m = mark_region(build_rect_mesh(10, 10), spec)
    assert not m.element_region.any()


def test_mark_region_bounds_mismatch():
    spec = InclusionSpec([Disc((0.5, 0.5), 0.1)], bounds=(0.0, 1.0, 0.0, 1.0))
    with pytest.raises(GeometryMismatch):
        mark_region(build_rect_mesh(10, 10), spec)


def test_interface_loops_square():
    spec = InclusionSpec([Square((0.0, 0.0), 0.2)])
    m = mark_region(build_rect_mesh(10, 10), spec)
    iface = m.interface()
    loops = iface.loops()
    assert len(loops) == 1
    assert iface.lengths.sum() == pytest.approx(1.6)


def test_interface_two_components():
    spec = InclusionSpec([Square((-0.25, 0.0), 0.1), Square((0.25, 0.0), 0.1)])
    m = mark_region(build_rect_mesh(20, 20), spec)
    assert len(m.interface().loops()) == 2


def test_deform_rejects_negative_t_and_inversion():
    m = build_rect_mesh(4, 4)
    theta = np.zeros_like(m.vertices)
    with pytest.raises(ValueError):
        deform_mesh(m, theta, -1.0)
    theta[:, 0] = -10 * m.vertices[:, 0]
    with pytest.raises(InvertedElement):
        deform_mesh(m, theta, 1.0)


def test_deform_zero_is_identity():
    m = build_rect_mesh(4, 4)
    assert deform_mesh(m, np.ones_like(m.vertices), 0.0) is m


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.05), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_small_smooth_deformation_keeps_orientation(t, a, b):
    m = build_rect_mesh(8, 8)
    x, y = m.vertices.T
    bump = (0.25 - x**2) * (0.25 - y**2) * 16
    theta = np.column_stack([a * bump, b * bump])
    d = deform_mesh(m, theta, t)
    assert np.all(d.signed_areas > 0)
    assert d.signed_areas.sum() == pytest.approx(1.0)


def test_quality_right_isoceles():
    m = build_rect_mesh(3, 3)
    assert min_triangle_quality(m) == pytest.approx(2 * (np.sqrt(2) - 1), rel=1e-12)


def test_mesh_roundtrip(tmp_path):
    m = build_rect_mesh(3, 2)
    write_mesh(m, tmp_path / "m.txt")
    r = read_mesh(tmp_path / "m.txt")
    np.testing.assert_array_equal(r.vertices, m.vertices)
    np.testing.assert_array_equal(r.triangles, m.triangles)
    assert r.bounds == pytest.approx(m.bounds)
    assert len(r.boundary_edges) == len(m.boundary_edges)


def test_vtk_header(tmp_path):
    m = build_rect_mesh(2, 2)
    write_vtk(m, tmp_path / "m.vtk", point_data={"u": np.arange(m.n_vertices, dtype=float)})
    text = (tmp_path / "m.vtk").read_text()
    assert text.startswith("# vtk DataFile")
    assert f"POINTS {m.n_vertices}" in text
    assert "SCALARS u" in text
