import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from marginreg.geometry import (
    FiducialSet,
    GeometryError,
    MeshProximity,
    NeighborIndex,
    PointCloud,
    RigidTransform,
    SimilarityTransform,
    TriMesh,
    apply_transform,
    brute_force_closest_on_mesh,
    brute_force_nearest,
    closest_points_on_triangles,
    compose,
    farthest_point_sampling,
    invert,
    nearest_neighbor,
    random_rigid,
    rotation_about_axis,
)


def test_apply_transform_examples():
    assert np.allclose(apply_transform(RigidTransform.identity(), [1, 2, 3]), [1, 2, 3])
    rz = RigidTransform(rotation_about_axis([0, 0, 1], np.pi), np.zeros(3))
    assert np.allclose(apply_transform(rz, [1, 0, 0]), [-1, 0, 0], atol=1e-12)
    s = SimilarityTransform(2.0, np.eye(3), [0, 0, 1])
    assert np.allclose(apply_transform(s, [1, 1, 1]), [2, 2, 3])


def test_compose_and_invert_examples(rng):
    T = random_rigid(rng)
    assert np.allclose(compose(RigidTransform.identity(), T).matrix(), T.matrix(), atol=1e-12)
    assert np.allclose(compose(T, invert(T)).matrix(), np.eye(4), atol=1e-9)
    r90 = RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2), np.zeros(3))
    r180 = rotation_about_axis([0, 0, 1], np.pi)
    assert np.allclose(compose(r90, r90).rotation, r180, atol=1e-12)
    assert np.allclose(invert(RigidTransform(np.eye(3), [1, 0, 0])).translation, [-1, 0, 0])
    assert np.allclose(invert(invert(T)).matrix(), T.matrix(), atol=1e-12)


def test_compose_matches_sequential_application_and_is_associative(rng):
    for _ in range(50):
        a, b, c = (random_rigid(rng) for _ in range(3))
        p = rng.normal(size=(10, 3))
        assert np.allclose(compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-9)
        lhs = compose(compose(a, b), c).matrix()
        rhs = compose(a, compose(b, c)).matrix()
        assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_distance_preservation(rng):
    p = rng.normal(size=(20, 3))
    d0 = np.linalg.norm(p[:, None] - p[None], axis=-1)
    T = random_rigid(rng)
    q = T.apply(p)
    assert np.allclose(np.linalg.norm(q[:, None] - q[None], axis=-1), d0, rtol=1e-9, atol=1e-12)
    S = SimilarityTransform(0.7, T.rotation, T.translation)
    q = S.apply(p)
    assert np.allclose(np.linalg.norm(q[:, None] - q[None], axis=-1), 0.7 * d0, rtol=1e-9, atol=1e-12)


def test_rotation_invariants_enforced():
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(GeometryError):
        RigidTransform(2 * np.eye(3), np.zeros(3))
    with pytest.raises(GeometryError):
        SimilarityTransform(0.0, np.eye(3), np.zeros(3))


def test_from_matrix_reprojects_with_warning(caplog):
    m = np.eye(4)
    m[:3, :3] = rotation_about_axis([1, 2, 3], 0.4)
    m[0, 0] += 1e-4
    m[:3, 3] = [1, 2, 3]
    with caplog.at_level(logging.WARNING):
        t = RigidTransform.from_matrix(m)
    assert "re-projecting" in caplog.text
    assert np.allclose(t.rotation.T @ t.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(t.translation, [1, 2, 3])


def test_container_invariants():
    with pytest.raises(GeometryError):
        PointCloud("camera", np.zeros((3, 3)), colors=np.zeros((2, 3)))
    with pytest.raises(GeometryError):
        PointCloud("camera", np.zeros((2, 3)), normals=np.array([[1.0, 0, 0], [0, 2.0, 0]]))
    with pytest.raises(GeometryError):
        PointCloud("nowhere", np.zeros((1, 3)))
    with pytest.raises(GeometryError):
        TriMesh("camera", np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(GeometryError):
        TriMesh("camera", np.zeros((3, 3)), [[0, 1, 1]])
    with pytest.raises(GeometryError):
        TriMesh("camera", np.zeros((3, 3)), [[0, 1, 2]], labels=[0, 1])
    with pytest.raises(GeometryError):
        FiducialSet("camera", ("A", "A", "B"), np.zeros((3, 3)))
    with pytest.raises(GeometryError):
        PointCloud("camera", [[np.nan, 0, 0]])


def test_fiducial_correspondence_by_labels():
    a = FiducialSet("camera", ("F1", "F2", "F3"), np.eye(3))
    b = FiducialSet("cavity", ("F1", "F2", "F3"), np.zeros((3, 3)))
    c = FiducialSet("cavity", ("F1", "F3", "F2"), np.zeros((3, 3)))
    assert a.corresponds(b) and not a.corresponds(c)
    assert np.allclose(a.subset(["F3", "F1"]).positions, [[0, 0, 1], [1, 0, 0]])


def test_arrays_are_read_only():
    pc = PointCloud("camera", np.zeros((2, 3)))
    with pytest.raises(ValueError):
        pc.points[0, 0] = 1.0


def test_nearest_neighbor_examples():
    assert nearest_neighbor([0, 0, 0], PointCloud("camera", [[1, 0, 0], [0, 2, 0]])) == (0, 1.0)
    pts = np.array([[0.3, 0.1, 0.0], [1.0, 1.0, 1.0]])
    assert nearest_neighbor(pts[1], pts) == (1, 0.0)
    with pytest.raises(GeometryError, match="empty target"):
        nearest_neighbor([0, 0, 0], np.zeros((0, 3)))


def test_nearest_neighbor_ties_go_to_lowest_index():
    pts = np.array([[1.0, 0, 0], [0, 1.0, 0], [-1.0, 0, 0], [0, -1.0, 0], [0, 0, 1.0]])
    for perm_seed in range(5):
        order = np.random.default_rng(perm_seed).permutation(5)
        idx, d = nearest_neighbor([0, 0, 0], pts[order])
        assert idx == 0 and d == 1.0


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 5000), seed=st.integers(0, 2**31 - 1))
def test_nearest_neighbor_matches_exhaustive_scan(n, seed):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(n, 3))
    q = r.normal(size=3)
    assert nearest_neighbor(q, pts) == brute_force_nearest(q, pts)


def test_neighbor_index_batch_matches_scan(rng):
    pts = rng.uniform(size=(1000, 3))
    qs = rng.uniform(size=(200, 3))
    idx, dist = NeighborIndex(pts).query(qs)
    for q, i, d in zip(qs, idx, dist):
        j, e = brute_force_nearest(q, pts)
        assert i == j and abs(d - e) < 1e-15


def test_farthest_point_sampling_is_deterministic_and_spread(rng):
    pts = rng.uniform(size=(500, 3))
    a = farthest_point_sampling(pts, 20, seed=3)
    b = farthest_point_sampling(pts, 20, seed=3)
    assert np.array_equal(a, b) and len(set(a.tolist())) == 20
    assert np.array_equal(farthest_point_sampling(pts, 600), np.arange(500))
    # greedy 2-approximation: every point lies within the largest gap of the chosen set
    sel = pts[a]
    cover = np.max(np.min(np.linalg.norm(pts[:, None] - sel[None], axis=-1), axis=1))
    assert cover < 0.5


def _sampled_triangle_min(p, a, b, c, n=200):
    # dense barycentric grid oracle
    u, v = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
    m = u + v <= 1
    u, v = u[m], v[m]
    q = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return np.min(np.linalg.norm(q - p, axis=1))


def test_closest_point_on_triangle_against_dense_sampling(rng):
    for _ in range(30):
        a, b, c = rng.normal(size=(3, 3))
        p = rng.normal(size=3) * 2
        q, bary = closest_points_on_triangles(p[None], a[None], b[None], c[None])
        d = np.linalg.norm(q[0] - p)
        assert d <= _sampled_triangle_min(p, a, b, c) + 1e-12
        assert abs(d - _sampled_triangle_min(p, a, b, c)) < 0.02 * np.linalg.norm(b - a + c - a) + 1e-9
        assert np.all(bary >= -1e-12) and abs(bary.sum() - 1) < 1e-12
        assert np.allclose(bary[0] @ np.array([a, b, c]), q[0])


def test_mesh_proximity_matches_brute_force_on_smooth_mesh(identity_phantom, rng):
    mesh = identity_phantom.insitu_mesh
    prox = MeshProximity(mesh.faces)
    pts = mesh.vertices[rng.choice(len(mesh.vertices), 100)] + rng.normal(scale=5e-4, size=(100, 3))
    face, bary, q, d = prox.query(mesh.vertices, pts)
    for i, p in enumerate(pts):
        _, qb, db = brute_force_closest_on_mesh(mesh.vertices, mesh.faces, p)
        assert d[i] <= db + 1e-6
    assert np.allclose(np.einsum("ni,nic->nc", bary, mesh.vertices[mesh.faces[face]]), q)


def test_mesh_proximity_hint_is_never_worse(identity_phantom, rng):
    mesh = identity_phantom.insitu_mesh
    prox = MeshProximity(mesh.faces, n_vertices=1)
    pts = mesh.vertices[:50] + rng.normal(scale=3e-3, size=(50, 3))
    hint, _, _, d0 = prox.query(mesh.vertices, pts)
    moved = mesh.vertices + rng.normal(scale=1e-3, size=mesh.vertices.shape)
    _, _, _, d_hint = prox.query(moved, pts, hint)
    tri = moved[mesh.faces[hint]]
    q, _ = closest_points_on_triangles(pts, tri[:, 0], tri[:, 1], tri[:, 2])
    assert np.all(d_hint <= np.linalg.norm(q - pts, axis=1) + 1e-15)
