import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgfem.mesh import (
    BoundaryEdge,
    Mesh2D,
    audit_conformity,
    bisect,
    compose_parents,
    edge_jump_frame,
    initial_lshape,
    load_mesh,
    mesh_from_text,
    mesh_to_text,
    reference_triangle,
    save_mesh,
    uniform_refine,
    unit_square,
)


def on_lshape_boundary(P, tol=1e-12):
    x, y = P[:, 0], P[:, 1]
    outer = (np.abs(x) < tol) | (np.abs(y) < tol) | (np.abs(x - 1) < tol) | (np.abs(y - 1) < tol)
    notch = ((np.abs(x - 0.5) < tol) & (y >= 0.5 - tol)) | ((np.abs(y - 0.5) < tol) & (x >= 0.5 - tol))
    return outer | notch


def assert_conforming(mesh):
    counts = np.bincount(mesh.tri_edges.ravel(), minlength=mesh.n_edges)
    assert counts.max() <= 2
    assert audit_conformity(mesh) == 0
    assert np.all(mesh.areas > 0)


def test_reference_bisection():
    m = reference_triangle()
    fine, rmap = bisect(m, [0])
    assert fine.n_triangles == 2
    assert np.allclose(fine.areas, m.areas[0] / 2, rtol=1e-15)
    assert rmap.parent.tolist() == [0, 0]


def test_empty_marking_is_identity():
    m = initial_lshape(0.25)
    fine, rmap = bisect(m, [])
    assert np.array_equal(fine.triangles, m.triangles)
    assert np.array_equal(rmap.parent, np.arange(m.n_triangles))
    assert len(rmap.new_vertices) == 0


def test_lshape_geometry():
    m = initial_lshape(0.1)
    assert m.areas.sum() == pytest.approx(0.75, rel=1e-14)
    assert np.all(m.vertices >= 0) and np.all(m.vertices <= 1)
    assert not np.any((m.centroids[:, 0] > 0.5) & (m.centroids[:, 1] > 0.5))
    assert 100 <= m.n_triangles <= 300  # same order as the coarse benchmark mesh
    assert_conforming(m)
    bv = m.vertices[m.edges[m.boundary_edges]].reshape(-1, 2)
    assert np.all(on_lshape_boundary(bv))


def test_local_refinement_stays_local():
    m = initial_lshape(0.1)
    corner = int(np.argmin(np.linalg.norm(m.centroids - 0.5, axis=1)))
    fine, rmap = bisect(m, [corner])
    assert_conforming(fine)
    assert corner in rmap.refined
    assert len(rmap.refined) < 10
    assert fine.areas.sum() == pytest.approx(0.75, rel=1e-14)


def test_uniform_counts():
    m = initial_lshape(0.2)
    assert uniform_refine(m, 0) is m
    f = uniform_refine(m, 1)
    assert m.n_triangles + 1 <= f.n_triangles <= 4 * m.n_triangles
    assert_conforming(f)
    r = uniform_refine(reference_triangle(), 2)
    assert r.areas.sum() == pytest.approx(0.5, rel=1e-14)


def test_uniform_parents_compose():
    m = initial_lshape(0.25)
    f1, r1 = bisect(m, np.arange(m.n_triangles))
    f2, r2 = bisect(f1, [0, 3])
    anc = compose_parents(r1.parent, r2.parent)
    assert np.array_equal(anc, f2.root)
    _, anc2 = uniform_refine(m, 2, return_parents=True)
    assert np.array_equal(anc2, uniform_refine(m, 2).root)


def _area_halving_error(mesh, root_areas):
    expected = root_areas[mesh.root] * 0.5 ** mesh.generation.astype(float)
    return np.max(np.abs(mesh.areas - expected) / expected)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_adaptive_sequence(seed):
    rng = np.random.default_rng(seed)
    m = initial_lshape(0.2)
    a0 = m.areas.copy()
    verts = m.vertices
    for _ in range(5):
        k = max(1, int(rng.integers(1, max(2, m.n_triangles // 4))))
        m, rmap = bisect(m, rng.choice(m.n_triangles, size=k, replace=False))
        assert_conforming(m)
        assert _area_halving_error(m, a0) <= 1e-14
        # nested: old vertices survive with the same ids
        assert np.array_equal(m.vertices[: len(verts)], verts)
        verts = m.vertices


def test_children_inside_parent():
    m = initial_lshape(0.25)
    fine, rmap = bisect(m, np.arange(0, m.n_triangles, 3))
    P = m.vertices[m.triangles[rmap.parent]]
    c = fine.centroids
    # barycentric coordinates of child centroids in their parents
    A = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=2)
    lam = np.linalg.solve(A, (c - P[:, 0])[..., None])[..., 0]
    assert np.all(lam >= -1e-14) and np.all(lam.sum(axis=1) <= 1 + 1e-14)


def test_min_angle_floor_over_refinements():
    m = initial_lshape(0.1)
    a0 = m.min_angles.min()
    angles = set()
    rng = np.random.default_rng(3)
    for _ in range(8):
        m, _ = bisect(m, rng.choice(m.n_triangles, size=m.n_triangles // 3, replace=False))
        angles |= set(np.round(m.min_angles, 10).tolist())
        assert m.min_angles.min() >= 0.4 * a0
    assert len(angles) <= 8


def test_jump_frame():
    m = unit_square(1.0)  # two triangles sharing the diagonal
    interior = np.flatnonzero(m.edge_tris[:, 1] >= 0)
    assert len(interior) == 1
    e = int(interior[0])
    (t0, t1), n, h = edge_jump_frame(m, e)
    assert h == pytest.approx(np.sqrt(2))
    assert np.linalg.norm(n) == pytest.approx(1.0)
    assert np.array_equal(edge_jump_frame(m, e)[1], n)
    a, b = m.vertices[m.edges[e]]
    assert np.dot(b - a, n) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(BoundaryEdge):
        edge_jump_frame(m, int(m.boundary_edges[0]))
    # hat function of vertex (0, 0): gradient jump across the diagonal, by hand
    v = m.vertices
    xi = (np.linalg.norm(v, axis=1) == 0).astype(float)
    grads = []
    for t in (t0, t1):
        P = v[m.triangles[t]]
        A = np.column_stack([P[1] - P[0], P[2] - P[0]])
        grads.append(np.linalg.solve(A.T, [xi[m.triangles[t][1]] - xi[m.triangles[t][0]],
                                           xi[m.triangles[t][2]] - xi[m.triangles[t][0]]]))
    jump = (grads[0] - grads[1]) @ n
    # the diagonal runs from (0,0) to (1,1): the hat is 1-x below it and 1-y above,
    # so the gradient jump is (-1, 1) and its normal component has size sqrt(2)
    assert abs(jump) == pytest.approx(np.sqrt(2), rel=1e-14)
    assert np.allclose(grads[0] - grads[1], -(grads[1] - grads[0]))


def test_text_roundtrip(tmp_path):
    m, _ = bisect(initial_lshape(0.25), [0, 5])
    m2 = mesh_from_text(mesh_to_text(m))
    assert np.array_equal(m2.triangles, m.triangles)
    assert np.array_equal(m2.vertices, m.vertices)
    save_mesh(m, tmp_path / "m.txt")
    assert np.array_equal(load_mesh(tmp_path / "m.txt").triangles, m.triangles)


def test_orientation_fixed():
    m = Mesh2D(np.array([[0.0, 0], [0, 1], [1, 0]]), [[0, 1, 2]])
    assert m.areas[0] == pytest.approx(0.5)
