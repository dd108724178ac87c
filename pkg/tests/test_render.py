import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from facecode.model import CodeVector, Mesh, build_mesh, compute_vertex_normals
from facecode.render import (
    Camera, RigidPose, bilinear_sample, canonicalize_axis_angle, project, rasterize_triangles,
    render_interpolated, render_pointsplat, rotation_from_axis_angle, rotation_jacobian, sh_basis,
    shade_vertices, transform_points, visibility_mask,
)

vec3 = arrays(float, 3, elements=st.floats(-4, 4, allow_nan=False))


def test_camera_defaults():
    cam = Camera(224, 160)
    assert cam.focal_length == 336.0
    assert cam.principal_point == (112.0, 80.0)
    with pytest.raises(ValueError):
        Camera(0, 10)
    with pytest.raises(ValueError):
        Camera(10, 10, focal_length=-1)
    with pytest.raises(ValueError):
        Camera(10, 10, near=2.0, far=1.0)


def test_rotation_examples():
    np.testing.assert_array_equal(rotation_from_axis_angle([0, 0, 0]), np.eye(3))
    r = rotation_from_axis_angle([0, 0, np.pi / 2])
    np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_rotation_orthogonal_1000(rng):
    for w in rng.normal(0, 2, (1000, 3)):
        r = rotation_from_axis_angle(w)
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-10)
        assert abs(np.linalg.det(r) - 1) < 1e-10


@settings(max_examples=50, deadline=None)
@given(vec3)
def test_rotation_matches_exponential_series(w):
    np.testing.assert_allclose(rotation_from_axis_angle(w), oracles.rodrigues(w), atol=1e-12)


@pytest.mark.parametrize("scale", [1e-6, 1e-7, 1e-8, 1e-9, 1e-10])
def test_rotation_taylor_branch_continuity(scale):
    w = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8]) * scale
    np.testing.assert_allclose(rotation_from_axis_angle(w), oracles.rodrigues(w), atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(vec3)
def test_rotation_jacobian_finite_difference(w):
    jac = rotation_jacobian(w)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (rotation_from_axis_angle(w + e) - rotation_from_axis_angle(w - e)) / (2 * h)
        np.testing.assert_allclose(jac[i], fd, atol=1e-7)


def test_rotation_jacobian_near_zero():
    w = np.array([1e-10, -2e-10, 5e-11])
    jac = rotation_jacobian(w)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (rotation_from_axis_angle(w + e) - rotation_from_axis_angle(w - e)) / (2 * h)
        np.testing.assert_allclose(jac[i], fd, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(float, 3, elements=st.floats(-20, 20, allow_nan=False)))
def test_canonicalize_same_rotation(w):
    c = canonicalize_axis_angle(w)
    assert np.linalg.norm(c) < np.pi + 1e-12
    np.testing.assert_allclose(rotation_from_axis_angle(c), rotation_from_axis_angle(w), atol=1e-9)


def test_transform_examples(rng):
    p = rng.normal(size=(10, 3))
    np.testing.assert_array_equal(transform_points(p, RigidPose.identity()), p)
    t = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(transform_points(p, RigidPose(np.zeros(3), t)), p + t)
    w1, t1, w2, t2 = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
    r1, r2 = rotation_from_axis_angle(w1), rotation_from_axis_angle(w2)
    twice = transform_points(transform_points(p, RigidPose(w1, t1)), RigidPose(w2, t2))
    once = p @ (r2 @ r1).T + (r2 @ t1 + t2)
    np.testing.assert_allclose(twice, once, atol=1e-12)


def test_project_examples():
    cam = Camera(224, 224)
    pr = project(np.array([[0.0, 0.0, -3.0], [0.1, 0.0, -2.0], [0.0, 0.0, 1.0]]), cam)
    np.testing.assert_allclose(pr.uv[0], cam.principal_point)
    # frozen from the pinhole oracle: 112 + 336 * 0.1 / 2
    assert pr.uv[1, 0] == pytest.approx(128.8, abs=1e-12)
    assert pr.in_frustum.tolist() == [True, True, False]
    u, v, d = oracles.project_point([0.1, 0.0, -2.0], 224, 224, 336.0)
    assert (u, v, d) == pytest.approx((pr.uv[1, 0], pr.uv[1, 1], pr.depth[1]))


def test_project_out_of_image():
    cam = Camera(100, 100)
    pr = project(np.array([[10.0, 0.0, -1.0], [0.0, -10.0, -1.0]]), cam)
    assert not pr.in_frustum.any()


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.5, 10))
def test_project_depth_scaling(x, y, d):
    cam = Camera(224, 224)
    pr = project(np.array([[x, y, -d], [x, y, -2 * d]]), cam)
    c = np.array(cam.principal_point)
    np.testing.assert_allclose(np.linalg.norm(pr.uv[1] - c), 0.5 * np.linalg.norm(pr.uv[0] - c), atol=1e-9)


def test_sh_examples(rng):
    n = rng.normal(size=(20, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    h = sh_basis(n)
    np.testing.assert_allclose(h[:, 0], 0.2820948, atol=1e-7)
    np.testing.assert_allclose(sh_basis([0, 0, 1.0])[1:4], [0, 0.4886025, 0], atol=1e-7)
    hn = sh_basis(-n)
    np.testing.assert_allclose(hn[:, 1:4], -h[:, 1:4])
    np.testing.assert_allclose(hn[:, 4:], h[:, 4:])
    for i in range(20):
        np.testing.assert_allclose(h[i], oracles.sh_loop(n[i]), atol=1e-7)


def test_sh_rejects_non_unit():
    with pytest.raises(ValueError):
        sh_basis([0, 0, 1.1])


def test_shade_examples(basis, rng):
    mesh = build_mesh(basis, CodeVector())
    g = np.zeros(27)
    g[[0, 9, 18]] = [2.0, 3.0, 4.0]
    out = shade_vertices(mesh.reflectance, mesh.normals, rng.normal(size=3), g)
    np.testing.assert_allclose(out, mesh.reflectance * np.array([2.0, 3.0, 4.0]) * 0.28209479177387814)
    np.testing.assert_array_equal(shade_vertices(mesh.reflectance, mesh.normals, np.zeros(3), np.zeros(27)), 0)
    w, gamma = rng.normal(size=3), rng.normal(size=27)
    ref = oracles.shade_loop(mesh.reflectance[:50], mesh.normals[:50], rotation_from_axis_angle(w), gamma)
    np.testing.assert_allclose(shade_vertices(mesh.reflectance[:50], mesh.normals[:50], w, gamma), ref, atol=1e-7)


def _sphere(n=2000):
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + 5**0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def test_visibility_examples():
    cam = Camera(224, 224)
    pts = _sphere() * 0.5 + [0, 0, -5]
    normals = _sphere()
    mask, count = visibility_mask(normals, np.zeros(3), project(pts, cam))
    # hemisphere-counting oracle: normals with positive z
    oracle = int(np.sum(normals[:, 2] > 0))
    assert oracle == 1000
    assert abs(count - 1000) <= 50
    _, none = visibility_mask(-np.tile([0, 0, 1.0], (5, 1)), np.zeros(3), project(np.tile([0, 0, -5.0], (5, 1)), cam))
    assert none == 0
    patch = np.array([[x, y, -5.0] for x in (-0.1, 0, 0.1) for y in (-0.1, 0, 0.1)])
    _, full = visibility_mask(np.tile([0, 0, 1.0], (9, 1)), np.zeros(3), project(patch, cam))
    assert full == 9


def test_bilinear_examples(rng):
    img = rng.uniform(size=(6, 8, 3))
    v, ok = bilinear_sample(img, (3.5, 2.5))
    assert ok
    np.testing.assert_allclose(v, img[2, 3])
    v, ok = bilinear_sample(img, (4.0, 2.5))
    np.testing.assert_allclose(v, 0.5 * (img[2, 3] + img[2, 4]))
    const = np.full((6, 8, 3), 0.3)
    for uv in rng.uniform([0.5, 0.5], [7.5, 5.5], (20, 2)):
        np.testing.assert_allclose(bilinear_sample(const, uv)[0], 0.3)
    assert not bilinear_sample(img, (0.2, 3.0))[1]
    assert not bilinear_sample(img, (7.8, 3.0))[1]
    for uv in rng.uniform([0.5, 0.5], [7.5, 5.5], (20, 2)):
        np.testing.assert_allclose(bilinear_sample(img, uv)[0], oracles.bilinear_loop(img, *uv), atol=1e-14)


@settings(max_examples=50, deadline=None)
# the last pixel center is excluded: its 2x2 cell leaves the image
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(0.5, 9.5, exclude_max=True),
       st.floats(0.5, 7.5, exclude_max=True))
def test_bilinear_reproduces_affine(a, b, c, u, v):
    jj, ii = np.meshgrid(np.arange(10) + 0.5, np.arange(8) + 0.5)
    img = np.repeat((a * jj + b * ii + c)[..., None], 3, axis=2)
    val, ok = bilinear_sample(img, (u, v))
    assert ok
    np.testing.assert_allclose(val, a * u + b * v + c, atol=1e-12)


def test_pointsplat_examples(basis):
    cam = Camera(64, 64)
    pos = np.array([[0.0, 0.0, -2.0], [0.0, 0.0, -3.0]])
    normals = np.tile([0, 0, 1.0], (2, 1))
    mesh = Mesh(pos, np.ones((2, 3)), normals, np.zeros(2, bool), np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    img, cov = render_pointsplat(mesh, RigidPose.identity(), cam, np.zeros(27))
    assert cov.sum() == 1
    np.testing.assert_array_equal(img[cov][0], [1, 0, 0])
    back = Mesh(pos, np.ones((2, 3)), -normals, np.zeros(2, bool))
    img, cov = render_pointsplat(back, RigidPose.identity(), cam, np.ones(27), background=0.25)
    assert cov.sum() == 0 and np.all(img == 0.25)
    code = CodeVector()
    code.gamma[[0, 9, 18]] = 3.0
    code.t[2] = -6.0
    m = build_mesh(basis, code)
    a = render_pointsplat(m, RigidPose(code.omega, code.t), Camera(224, 224), code.gamma)
    b = render_pointsplat(m, RigidPose(code.omega, code.t), Camera(224, 224), code.gamma)
    np.testing.assert_array_equal(a[0], b[0])


def test_rasterize_square():
    uv = np.array([[1.0, 1.0], [5.0, 1.0], [5.0, 5.0], [1.0, 5.0]])
    mask = rasterize_triangles(uv, np.array([[0, 1, 2], [0, 2, 3]]), 8, 8)
    assert mask.sum() == 16 and mask[1:5, 1:5].all()


def test_interpolated_render_is_exact_at_vertices(basis):
    cam = Camera(224, 224)
    code = CodeVector()
    code.gamma[[0, 9, 18]] = 3.0
    code.gamma[2] = code.gamma[11] = code.gamma[20] = 0.4
    code.omega[:] = [0.1, -0.2, 0.05]
    code.t[2] = -6.5
    mesh = build_mesh(basis, code)
    pose = RigidPose(code.omega, code.t)
    img, cov = render_interpolated(mesh, pose, cam, code.gamma, margin=4)
    proj = project(transform_points(mesh.positions, pose), cam)
    vis, _ = visibility_mask(mesh.normals, code.omega, proj)
    colors = shade_vertices(mesh.reflectance, mesh.normals, code.omega, code.gamma)
    worst = max(np.max(np.abs(bilinear_sample(img, proj.uv[i])[0] - colors[i])) for i in np.flatnonzero(vis))
    assert worst < 1e-6
    assert cov.sum() > 5000
    normals, _ = compute_vertex_normals(mesh.positions, basis.triangles)
    np.testing.assert_array_equal(normals, mesh.normals)
