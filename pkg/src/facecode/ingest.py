"""Frame, landmark and manifest ingestion plus the face crop."""

from __future__ import annotations

import csv
import glob
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .energy import LandmarkSet
from .model import N_LANDMARKS

logger = logging.getLogger(__name__)

CROP_SIZE = 224
CROP_EXPANSION = 0.10
N_SOURCE_LANDMARKS = 68


class DataError(ValueError):
    """Malformed or unusable input data (maps to CLI exit code 2)."""


class DegenerateLandmarksError(DataError):
    pass


@dataclass
class FrameObservation:
    image: np.ndarray
    landmarks: LandmarkSet
    crop_rect: tuple = (0.0, 0.0, 0.0, 0.0)
    frame_index: int = 0
    timestamp: float | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[2] != 3 or min(self.image.shape[:2]) < 1:
            raise ValueError(f"image must be (H, W, 3), got {self.image.shape}")


@dataclass
class VideoManifest:
    video_id: str
    subject_id: str
    label: int | None
    frame_paths: list = field(default_factory=list)
    landmarks_path: str = ""


# --------------------------------------------------------------------------
# landmark subset


def landmark_subset_table() -> np.ndarray:
    """Source indices (into the 68-point scheme) of the 48 fitted landmarks."""
    text = resources.files("facecode").joinpath("data/landmarks48.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    table = np.array([int(r["source_index"]) for r in sorted(rows, key=lambda r: int(r["subset_index"]))])
    if table.shape != (N_LANDMARKS,) or len(set(table.tolist())) != N_LANDMARKS:
        raise DataError("landmark subset table is corrupt")
    return table


def select_landmark_subset(landmarks_68, validity=None) -> LandmarkSet:
    pts = np.asarray(landmarks_68, dtype=np.float64)
    if pts.shape != (N_SOURCE_LANDMARKS, 2):
        raise DataError(f"expected {N_SOURCE_LANDMARKS}x2 landmarks, got {pts.shape}")
    if validity is None:
        validity = np.ones(N_SOURCE_LANDMARKS, dtype=bool)
    validity = np.asarray(validity, dtype=bool)
    idx = landmark_subset_table()
    return LandmarkSet(pts[idx], validity[idx])


# --------------------------------------------------------------------------
# crop


def crop_rect(points, image_shape, expansion: float = CROP_EXPANSION):
    """Square crop rectangle ``(x0, y0, x1, y1)`` around the points.

    The bounding box grows by ``expansion`` of its size on every side, is
    clamped to the image, then the shorter side is padded symmetrically to
    the longer one (the square may extend past the image border).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] < 2:
        raise DegenerateLandmarksError("at least two valid landmarks are needed for a crop")
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    w, h = x1 - x0, y1 - y0
    if not (w > 0 and h > 0):
        raise DegenerateLandmarksError("landmark bounding box has zero area")
    height, width = image_shape[:2]
    x0, x1 = max(x0 - expansion * w, 0.0), min(x1 + expansion * w, float(width))
    y0, y1 = max(y0 - expansion * h, 0.0), min(y1 + expansion * h, float(height))
    side = max(x1 - x0, y1 - y0)
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    return (cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2)


def resample_rect(image, rect, size: int = CROP_SIZE) -> np.ndarray:
    """Bilinear resample of ``rect`` onto a ``size`` x ``size`` grid; outside reads 0."""
    x0, y0, x1, y1 = rect
    s = (np.arange(size) + 0.5) / size
    xs = x0 + s * (x1 - x0) - 0.5
    ys = y0 + s * (y1 - y0) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((size, size, image.shape[2]))
    for c in range(image.shape[2]):
        out[..., c] = ndimage.map_coordinates(image[..., c], [yy, xx], order=1, mode="constant", cval=0.0)
    return out


def remap_points(points, rect, size: int = CROP_SIZE) -> np.ndarray:
    x0, y0, x1, y1 = rect
    scale = size / (x1 - x0)
    return (np.asarray(points, dtype=np.float64) - [x0, y0]) * scale


def crop_face(image, landmarks, validity=None, frame_index: int = 0, timestamp=None,
              size: int = CROP_SIZE) -> FrameObservation:
    """Crop and resample the face region; landmarks come back in crop pixels.

    ``landmarks`` may hold any number of points; the crop box uses the valid
    ones. With 68 points the 48-point fitting subset is selected afterwards.
    """
    image = np.asarray(image, dtype=np.float64)
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    if validity is None:
        validity = np.ones(pts.shape[0], dtype=bool)
    validity = np.asarray(validity, dtype=bool) & np.all(np.isfinite(pts), axis=1)
    rect = crop_rect(pts[validity], image.shape)
    mapped = remap_points(pts, rect, size)
    mapped[~validity] = -1.0
    if pts.shape[0] == N_SOURCE_LANDMARKS:
        lms = select_landmark_subset(mapped, validity)
    else:
        lms = LandmarkSet(mapped, validity)
    return FrameObservation(resample_rect(image, rect, size), lms, rect, frame_index, timestamp)


# --------------------------------------------------------------------------
# files


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, image) -> None:
    """PNG or binary PPM (P6) depending on the suffix."""
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(to_uint8(image), "RGB").save(path, format=fmt)


def read_landmark_file(path):
    """Rows of ``x0,y0,...,x67,y67``; ``-1,-1`` marks an invalid point.

    Returns ``(points, validity)`` with shapes (F, 68, 2) and (F, 68). An
    optional non-numeric header row is skipped.
    """
    points, valid = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = np.array([float(c) for c in row])
            except ValueError:
                if lineno == 1:
                    continue
                raise DataError(f"{path}:{lineno}: non-numeric landmark value") from None
            if vals.shape[0] != 2 * N_SOURCE_LANDMARKS:
                raise DataError(f"{path}:{lineno}: expected {2 * N_SOURCE_LANDMARKS} columns, got {vals.shape[0]}")
            p = vals.reshape(N_SOURCE_LANDMARKS, 2)
            points.append(p)
            valid.append(~np.all(p == -1.0, axis=1))
    if not points:
        return np.zeros((0, N_SOURCE_LANDMARKS, 2)), np.zeros((0, N_SOURCE_LANDMARKS), dtype=bool)
    return np.stack(points), np.stack(valid)


def write_landmark_file(path, points, validity=None) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, N_SOURCE_LANDMARKS, 2).copy()
    if validity is not None:
        points[~np.asarray(validity, dtype=bool)] = -1.0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"{a}{k}" for k in range(N_SOURCE_LANDMARKS) for a in ("x", "y")])
        for p in points:
            w.writerow([repr(float(v)) for v in p.reshape(-1)])


def expand_to_68(landmarks: LandmarkSet):
    """Place 48 subset points into a 68-point array; the rest are invalid."""
    pts = np.full((N_SOURCE_LANDMARKS, 2), -1.0)
    ok = np.zeros(N_SOURCE_LANDMARKS, dtype=bool)
    idx = landmark_subset_table()
    pts[idx] = landmarks.points
    ok[idx] = landmarks.validity
    pts[~ok] = -1.0
    return pts, ok


MANIFEST_COLUMNS = ("video_id", "subject_id", "label", "frames_glob", "landmarks_path")


def _parse_label(text, where):
    text = text.strip().lower()
    if text in ("", "unlabeled", "none"):
        return None
    if text in ("0", "1"):
        return int(text)
    raise DataError(f"{where}: label must be 0, 1 or empty, got {text!r}")


def read_manifest(path) -> list:
    """Manifest rows; relative paths resolve against the manifest's directory."""
    path = Path(path)
    base = path.parent
    out = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: manifest lacks columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            frames = sorted(glob.glob(str(base / row["frames_glob"].strip())))
            if not frames:
                raise DataError(f"{where}: no frames match {row['frames_glob']!r}")
            out.append(VideoManifest(row["video_id"].strip(), row["subject_id"].strip(), _parse_label(row["label"], where),
                                     frames, str(base / row["landmarks_path"].strip())))
    return out


def write_manifest(path, entries) -> None:
    """Frame globs are written relative to the manifest when possible."""
    base = Path(path).resolve().parent
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for e in entries:
            frames_glob = e.frame_paths if isinstance(e.frame_paths, str) else e.frame_paths[0]
            lm = Path(e.landmarks_path).resolve()
            w.writerow([e.video_id, e.subject_id, "" if e.label is None else e.label,
                        _relative(Path(frames_glob), base), _relative(lm, base)])


def _relative(p: Path, base: Path) -> str:
    try:
        return str(p.resolve().relative_to(base))
    except ValueError:
        return str(p.resolve())


def load_video(entry: VideoManifest, crop: bool = True, size: int = CROP_SIZE) -> list:
    """Read and crop every frame of a manifest row; frames with a degenerate
    landmark box are dropped with a warning."""
    points, valid = read_landmark_file(entry.landmarks_path)
    if points.shape[0] != len(entry.frame_paths):
        raise DataError(f"{entry.video_id}: {len(entry.frame_paths)} frames but {points.shape[0]} landmark rows")
    frames = []
    for i, fp in enumerate(entry.frame_paths):
        img = read_image(fp)
        if not crop:
            frames.append(FrameObservation(img, select_landmark_subset(points[i], valid[i]),
                                           (0.0, 0.0, float(img.shape[1]), float(img.shape[0])), i))
            continue
        try:
            frames.append(crop_face(img, points[i], valid[i], frame_index=i, size=size))
        except DegenerateLandmarksError as exc:
            logger.warning("%s frame %d rejected: %s", entry.video_id, i, exc)
    if not frames:
        raise DataError(f"{entry.video_id}: every frame was rejected")
    return frames
