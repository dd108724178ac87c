import numpy as np
import pytest

from facecode.energy import total_energy
from facecode.render import Camera
from facecode.synthetic import MotionConfig, generate_synthetic_video


@pytest.fixture(scope="module")
def cam():
    return Camera(224, 224)


def test_same_seed_same_video(basis, cam):
    a = generate_synthetic_video(basis, cam, 8, 3)
    b = generate_synthetic_video(basis, cam, 8, 3)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa.image, fb.image)
        np.testing.assert_array_equal(fa.landmarks.points, fb.landmarks.points)
    np.testing.assert_array_equal(a.features, b.features)
    c = generate_synthetic_video(basis, cam, 9, 3)
    assert not np.array_equal(a.features, c.features)


def test_identity_constant_frames_vary(basis, cam):
    v = generate_synthetic_video(basis, cam, 3, 4)
    f = v.features
    assert np.all(f[:, :160] == f[0, :160])
    assert np.all(np.std(f[:, 160:], axis=0) > 0)


def test_landmarks_inside_image(basis, cam):
    # landmark positions do not depend on the renderer; the splat is fast
    for seed in range(20):
        v = generate_synthetic_video(basis, cam, seed, 3, MotionConfig(renderer="pointsplat"))
        for fr in v.frames:
            p = fr.landmarks.points
            assert np.all((p >= 0) & (p < 224))


def test_noise_and_renderer_options(basis, cam):
    clean = generate_synthetic_video(basis, cam, 1, 1)
    noisy = generate_synthetic_video(basis, cam, 1, 1, MotionConfig(pixel_noise=0.02))
    d = noisy.frames[0].image - clean.frames[0].image
    assert 0.015 < d.std() < 0.025
    splat = generate_synthetic_video(basis, cam, 1, 1, MotionConfig(renderer="pointsplat"))
    assert splat.coverage[0].sum() < clean.coverage[0].sum()
    with pytest.raises(ValueError):
        MotionConfig(renderer="raytrace")
    with pytest.raises(ValueError):
        generate_synthetic_video(basis, cam, 1, 0)


def test_frames_are_self_consistent(basis, cam):
    v = generate_synthetic_video(basis, cam, 2, 2)
    for fr, code in zip(v.frames, v.codes):
        e = total_energy(code, basis, cam, fr)
        assert e.e_vert < 1e-6 and e.e_land < 1e-12
