import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ratemap.errors import DomainError
from ratemap.kinetics import Domain
from ratemap.mesh import (TriMesh, basis_eval, read_mesh, refine, refine_uniform,
                          uniform_initial_mesh, write_mesh)

UNIT = Domain((0.0, 1.0), (0.0, 1.0))


def test_initial_mesh_counts_benchmark():
    m = uniform_initial_mesh(Domain((1.0, 7.0), (0.0, 3.0)), 10, 10)
    assert (m.n_nodes, m.n_triangles) == (100, 162)
    m.check()
    m = uniform_initial_mesh(Domain((-4.0, 0.0), (1.0, 8.0), "kd", True), 20, 20)
    assert m.n_nodes == 400


def test_initial_mesh_single_cell():
    m = uniform_initial_mesh(UNIT, 2, 2)
    assert (m.n_nodes, m.n_triangles) == (4, 2)
    assert np.all(m.signed_areas > 0)
    with pytest.raises(DomainError):
        uniform_initial_mesh(UNIT, 1, 3)


def test_empty_marking_returns_input():
    m = uniform_initial_mesh(UNIT, 3, 3)
    assert refine(m, []) is m


def test_diagonal_pair_closure():
    # a cell's two triangles share their longest edge: marking one bisects both
    m = uniform_initial_mesh(Domain((0.0, 2.0), (0.0, 1.0)), 2, 2)
    r = refine(m, [0])
    assert (r.n_nodes, r.n_triangles) == (5, 4)
    np.testing.assert_allclose(r.nodes[4], [1.0, 0.5])
    r.check()


def test_longest_edge_propagation():
    # T=(A,B,C) has longest edge AB; its neighbour N=(A,D,B) has a longer edge AD, so
    # N is bisected along AD first and the child holding AB is bisected again
    nodes = [(0.0, 0.0), (2.0, 0.0), (1.0, 0.5), (1.2, -2.0)]
    m = TriMesh(nodes, [(0, 1, 2), (0, 3, 1)])
    m.check()
    r = refine(m, [0])
    r.check()
    assert (r.n_nodes, r.n_triangles) == (6, 5)
    new = {tuple(np.round(p, 12)) for p in r.nodes[4:].tolist()}
    assert new == {(1.0, 0.0), (0.6, -1.0)}
    assert np.isclose(r.areas.sum(), m.areas.sum())


def test_uniform_refinement_doubles():
    m = uniform_initial_mesh(UNIT, 2, 2)
    for k in range(1, 5):
        assert refine_uniform(m, k).n_triangles == 2 * 2 ** k


def test_nodes_are_nested():
    m = uniform_initial_mesh(UNIT, 4, 4)
    r = refine(m, [1, 5, 7])
    np.testing.assert_array_equal(r.nodes[:m.n_nodes], m.nodes)


def test_random_refinement_200_rounds():
    rng = np.random.default_rng(0)
    m = uniform_initial_mesh(Domain((1.0, 7.0), (0.0, 3.0)), 10, 10)
    floor = 0.5 * m.min_angles().min()
    for _ in range(200):
        k = int(rng.integers(1, 4))
        m = refine(m, rng.choice(m.n_triangles, size=k, replace=False))
        assert np.all(m.signed_areas > 0)
    assert m.is_conforming()
    m.check(min_angle=floor)
    assert m.min_angles().min() >= 10.0


def test_basis_values():
    m = uniform_initial_mesh(UNIT, 3, 3)
    assert basis_eval(m, 4, m.nodes[4]) == 1.0
    assert basis_eval(m, 4, m.nodes[0]) == 0.0
    tri = m.triangles[m.node_patches[4][0]]
    centroid = m.nodes[tri].mean(axis=0)
    assert basis_eval(m, 4, centroid) == pytest.approx(1.0 / 3.0, abs=1e-15)
    with pytest.raises(DomainError):
        basis_eval(m, 4, (2.0, 0.5))


def test_partition_of_unity():
    rng = np.random.default_rng(1)
    m = refine(uniform_initial_mesh(UNIT, 4, 4), [0, 3, 9])
    pts = rng.random((1000, 2))
    idx = m.locate(pts)
    lam = m.barycentric(idx, pts)
    assert np.all(idx >= 0)
    assert np.max(np.abs(lam.sum(axis=1) - 1.0)) <= 1e-12
    assert np.all(lam >= -1e-12)
    # a few points through the scalar hat evaluator as well
    for p in pts[:20]:
        total = sum(basis_eval(m, l, p) for l in range(m.n_nodes))
        assert abs(total - 1.0) <= 1e-12


def test_interpolation_reproduces_linear():
    m = refine(uniform_initial_mesh(UNIT, 5, 5), [2, 4])
    f = lambda p: 2.0 * p[:, 0] - 3.0 * p[:, 1] + 0.5
    pts = np.random.default_rng(2).random((200, 2))
    np.testing.assert_allclose(m.interpolate(f(m.nodes), pts), f(pts), atol=1e-12)


def test_mesh_file_roundtrip(tmp_path):
    m = refine(uniform_initial_mesh(UNIT, 3, 4), [1])
    write_mesh(m, tmp_path / "m.txt")
    r = read_mesh(tmp_path / "m.txt", UNIT)
    assert r == m
    text = (tmp_path / "m.txt").read_text().splitlines()
    assert text[0].startswith("v ") and text[-1].startswith("t ")


def test_check_detects_bad_mesh():
    bad = TriMesh([(0, 0), (1, 0), (0, 1), (1, 1)], [(0, 1, 2)], UNIT)
    assert not bad.is_conforming()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=12), st.integers(2, 6), st.integers(2, 6))
def test_refine_preserves_invariants(picks, nx, ny):
    m = uniform_initial_mesh(Domain((0.0, 3.0), (0.0, 2.0)), nx, ny)
    area = m.areas.sum()
    for p in picks:
        m = refine(m, [p % m.n_triangles])
    assert np.all(m.signed_areas > 0)
    assert m.is_conforming()
    assert np.isclose(m.areas.sum(), area)
