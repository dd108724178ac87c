import os
import subprocess
import sys

import numpy as np
import pytest

from facecode import _kernels_py, kernels

HAVE_CYTHON = "cython" in kernels.available_backends()
needs_cython = pytest.mark.skipif(not HAVE_CYTHON, reason="compiled backend not built")


@pytest.fixture
def ck():
    from facecode import _ckernels
    return _ckernels


@needs_cython
def test_normals_parity(ck, basis, rng):
    pos = basis.mean_geometry + rng.normal(0, 0.01, basis.mean_geometry.shape)
    # summation order differs between backends; agreement is to rounding
    np.testing.assert_allclose(ck.accumulate_normals(pos, basis.triangles),
                               _kernels_py.accumulate_normals(pos, basis.triangles), rtol=1e-13, atol=1e-16)
    g = rng.normal(size=pos.shape)
    np.testing.assert_allclose(ck.normals_backward(pos, basis.triangles, g),
                               _kernels_py.normals_backward(pos, basis.triangles, g), rtol=1e-13, atol=1e-15)


@needs_cython
def test_bilinear_parity(ck, rng):
    img = rng.uniform(size=(40, 50, 3))
    uv = np.vstack([rng.uniform(-3, 53, (500, 2)), [[np.nan, 3.0], [0.5, 0.5], [49.5, 39.5]]])
    a = ck.bilinear_gather(img, uv)
    b = _kernels_py.bilinear_gather(img, uv)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-14, atol=1e-15)
    cells = b[3]
    a = ck.bilinear_gather(img, uv + 0.3, cells)
    b = _kernels_py.bilinear_gather(img, uv + 0.3, cells)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-14, atol=1e-15)


@needs_cython
def test_splat_parity(ck, rng):
    uv = rng.uniform(0, 32, (400, 2))
    depth = rng.uniform(1, 3, 400)
    colors = rng.uniform(size=(400, 3))
    mask = rng.uniform(size=400) > 0.2
    for x, y in zip(ck.splat_zbuffer(uv, depth, colors, mask, 32, 32),
                    _kernels_py.splat_zbuffer(uv, depth, colors, mask, 32, 32)):
        np.testing.assert_array_equal(x, y)


def test_backend_switch():
    before = kernels.active_backend()
    try:
        kernels.use_backend("python")
        assert kernels.bilinear_gather is _kernels_py.bilinear_gather
        with pytest.raises(ValueError):
            kernels.use_backend("fortran")
    finally:
        kernels.use_backend(before)


def test_env_forces_fallback():
    env = dict(os.environ, FACECODE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from facecode import kernels; print(kernels.active_backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_cython
def test_energy_gradient_backend_independent(basis, rng):
    from facecode.fitting import energy_gradient
    from facecode.render import Camera
    from facecode.synthetic import gradcheck_case
    cam = Camera(224, 224)
    code, frame = gradcheck_case(basis, cam, np.random.default_rng(1))
    before = kernels.active_backend()
    try:
        kernels.use_backend("python")
        gp, bp = energy_gradient(code, basis, cam, frame)
        kernels.use_backend("cython")
        gc, bc = energy_gradient(code, basis, cam, frame)
    finally:
        kernels.use_backend(before)
    assert bp.total == pytest.approx(bc.total, rel=1e-13)
    np.testing.assert_allclose(gp, gc, rtol=1e-10, atol=1e-14)
