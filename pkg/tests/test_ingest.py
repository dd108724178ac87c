import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facecode.energy import LandmarkSet
from facecode.ingest import (
    DataError, DegenerateLandmarksError, VideoManifest, crop_face, crop_rect, expand_to_68, landmark_subset_table,
    load_video, read_image, read_landmark_file, read_manifest, select_landmark_subset, write_image,
    write_landmark_file, write_manifest,
)


def test_subset_table():
    t = landmark_subset_table()
    assert t.shape == (48,) and len(set(t.tolist())) == 48
    assert set(range(17, 27)) <= set(t) and {36, 39, 42, 45} <= set(t)
    assert set(range(27, 36)) <= set(t) and set(range(48, 68)) <= set(t) and set(range(6, 11)) <= set(t)


def test_select_subset(rng):
    pts = rng.uniform(0, 100, (68, 2))
    s = select_landmark_subset(pts)
    assert s.points.shape == (48, 2) and s.validity.all()
    valid = np.ones(68, bool)
    t = landmark_subset_table()
    valid[t[[0, 5, 17, 30, 47]]] = False
    valid[0] = False  # outside the subset
    s = select_landmark_subset(pts, valid)
    assert (~s.validity).sum() == 5
    with pytest.raises(DataError):
        select_landmark_subset(pts[:60])


def test_crop_rect_examples():
    pts = np.array([[100, 100], [200, 200], [150, 120]], dtype=float)
    assert crop_rect(pts, (1000, 1000)) == pytest.approx((90, 90, 210, 210))
    # clamped at the top-left, then padded back to a square
    near = np.array([[2, 50], [102, 150]], dtype=float)
    x0, y0, x1, y1 = crop_rect(near, (1000, 1000))
    assert x1 - x0 == pytest.approx(y1 - y0)
    with pytest.raises(DegenerateLandmarksError):
        crop_rect(np.array([[5, 5], [5, 9]], dtype=float), (100, 100))
    with pytest.raises(DegenerateLandmarksError):
        crop_rect(np.array([[5, 5]], dtype=float), (100, 100))


def test_crop_face_center_and_image(rng):
    img = rng.uniform(size=(400, 300, 3))
    pts = np.array([[100, 100], [200, 200], [150, 150]], dtype=float)
    obs = crop_face(img, pts)
    assert obs.image.shape == (224, 224, 3)
    assert obs.crop_rect == pytest.approx((90, 90, 210, 210))
    np.testing.assert_allclose(obs.landmarks.points[2], [112, 112], atol=0.5)
    # a uniform image stays uniform inside the image bounds
    flat = crop_face(np.full((400, 300, 3), 0.4), pts)
    np.testing.assert_allclose(flat.image[5:-5, 5:-5], 0.4)


def test_crop_of_crop_idempotent(rng):
    img = rng.uniform(size=(500, 500, 3))
    pts = rng.uniform(150, 350, (20, 2))
    first = crop_face(img, pts)
    second = crop_face(first.image, first.landmarks.points)
    np.testing.assert_allclose(second.crop_rect, first_rect_in_crop(first), atol=1e-9)


def first_rect_in_crop(obs):
    # re-applying the crop rule in crop pixels gives the same rectangle again,
    # up to clamping at the crop border
    from facecode.ingest import crop_rect as rule
    return rule(obs.landmarks.points, obs.image.shape)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_crop_preserves_distance_ratios(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(50, 450, (10, 2))
    obs = crop_face(np.zeros((500, 600, 3)), pts, size=224)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(obs.landmarks.points[:, None] - obs.landmarks.points[None], axis=-1)
    mask = d0 > 1
    ratio = d1[mask] / d0[mask]
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-6)


def test_crop_68_selects_subset(rng):
    pts = rng.uniform(100, 300, (68, 2))
    valid = np.ones(68, bool)
    valid[landmark_subset_table()[3]] = False
    obs = crop_face(rng.uniform(size=(400, 400, 3)), pts, valid)
    assert obs.landmarks.points.shape == (48, 2)
    assert obs.landmarks.validity.sum() == 47


def test_image_io(tmp_path, rng):
    img = rng.uniform(-0.2, 1.2, (10, 12, 3))
    for name in ("a.png", "a.ppm"):
        write_image(tmp_path / name, img)
        back = read_image(tmp_path / name)
        np.testing.assert_allclose(back, np.round(np.clip(img, 0, 1) * 255) / 255)
    assert (tmp_path / "a.ppm").read_bytes()[:2] == b"P6"
    (tmp_path / "bad.png").write_bytes(b"nope")
    with pytest.raises(DataError):
        read_image(tmp_path / "bad.png")


def test_landmark_file_roundtrip(tmp_path, rng):
    pts = rng.uniform(0, 200, (3, 68, 2))
    valid = np.ones((3, 68), bool)
    valid[1, 5] = False
    write_landmark_file(tmp_path / "l.csv", pts, valid)
    p, v = read_landmark_file(tmp_path / "l.csv")
    np.testing.assert_array_equal(v, valid)
    np.testing.assert_array_equal(p[valid], pts[valid])
    assert np.all(p[1, 5] == -1)
    (tmp_path / "bad.csv").write_text("1,2,3\n")
    with pytest.raises(DataError, match=":1:"):
        read_landmark_file(tmp_path / "bad.csv")


def test_expand_to_68_roundtrip(rng):
    lm = LandmarkSet(rng.uniform(0, 200, (48, 2)), rng.uniform(size=48) > 0.2)
    pts, ok = expand_to_68(lm)
    back = select_landmark_subset(pts, ok)
    np.testing.assert_array_equal(back.validity, lm.validity)
    np.testing.assert_array_equal(back.points[lm.validity], lm.points[lm.validity])


def _video_dir(tmp_path, rng, n=3, degenerate=None):
    d = tmp_path / "v"
    (d / "frames").mkdir(parents=True)
    pts = rng.uniform(60, 160, (n, 68, 2))
    if degenerate is not None:
        pts[degenerate] = 100.0
    for i in range(n):
        write_image(d / "frames" / f"f{i}.png", rng.uniform(size=(224, 224, 3)))
    write_landmark_file(d / "lm.csv", pts)
    e = VideoManifest("vid", "subj", 1, str(d / "frames" / "f*.png"), str(d / "lm.csv"))
    write_manifest(d / "m.csv", [e])
    return d


def test_manifest_and_load(tmp_path, rng):
    d = _video_dir(tmp_path, rng)
    [entry] = read_manifest(d / "m.csv")
    assert (entry.video_id, entry.subject_id, entry.label) == ("vid", "subj", 1)
    assert len(entry.frame_paths) == 3
    frames = load_video(entry)
    assert [f.frame_index for f in frames] == [0, 1, 2]
    assert frames[0].image.shape == (224, 224, 3)


def test_load_rejects_degenerate_frames(tmp_path, rng, caplog):
    d = _video_dir(tmp_path, rng, degenerate=1)
    frames = load_video(read_manifest(d / "m.csv")[0])
    assert [f.frame_index for f in frames] == [0, 2]
    assert "frame 1 rejected" in caplog.text


def test_manifest_errors(tmp_path, rng):
    d = _video_dir(tmp_path, rng)
    (d / "bad.csv").write_text("video_id,label\nx,1\n")
    with pytest.raises(DataError):
        read_manifest(d / "bad.csv")
    (d / "nolabel.csv").write_text("video_id,subject_id,label,frames_glob,landmarks_path\nv,s,2,frames/f*.png,lm.csv\n")
    with pytest.raises(DataError):
        read_manifest(d / "nolabel.csv")
    (d / "unl.csv").write_text("video_id,subject_id,label,frames_glob,landmarks_path\nv,s,,frames/f*.png,lm.csv\n")
    assert read_manifest(d / "unl.csv")[0].label is None
    (d / "few.csv").write_text("video_id,subject_id,label,frames_glob,landmarks_path\nv,s,1,frames/f0.png,lm.csv\n")
    with pytest.raises(DataError, match="landmark rows"):
        load_video(read_manifest(d / "few.csv")[0])
