"""Command line entry point: ``facecode <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import kernels
from .classifier import CheckpointFormatError, SequenceSample, TrainConfig, load_model, lopo_evaluate, predict, save_model, train
from .energy import DegenerateInputError
from .features import parse_features, write_features
from .fitting import (
    FitConfig, FitFailure, NumericalFailure, export_features, fit_video, gradient_check, identity_consistency_report,
    independent_frame_fits,
)
from .ingest import DataError, VideoManifest, expand_to_68, load_video, read_manifest, write_image, write_landmark_file, write_manifest
from .model import BasisFormatError, CodeVector, DimensionError, Mesh, build_mesh, generate_synthetic_basis, read_basis, write_basis
from .render import Camera, RigidPose, render_interpolated, render_pointsplat, rotation_from_axis_angle, shade_vertices
from .synthetic import MotionConfig, generate_synthetic_video, gradcheck_case

logger = logging.getLogger("facecode")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _camera(args, width=None, height=None) -> Camera:
    return Camera(width or args.width, height or args.height, args.focal)


def _load_basis(path):
    try:
        return read_basis(path)
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_basis(args):
    basis = generate_synthetic_basis(args.seed, args.vertices)
    write_basis(args.out, basis)
    print(f"wrote {args.out}: {basis.n_vertices} vertices, {basis.triangles.shape[0]} triangles")


def cmd_gen_synthetic(args):
    basis = _load_basis(args.basis)
    cam = _camera(args)
    motion = MotionConfig(pixel_noise=args.noise)
    video = generate_synthetic_video(basis, cam, args.seed, args.frames, motion)
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    lms, valid = [], []
    for i, fr in enumerate(video.frames):
        write_image(out / "frames" / f"frame_{i:04d}.{args.format}", fr.image)
        p, ok = expand_to_68(fr.landmarks)
        lms.append(p)
        valid.append(ok)
    write_landmark_file(out / "landmarks.csv", lms, valid)
    write_features(out / "ground_truth.csv", video.features)
    label = None if args.label is None else int(args.label)
    entry = VideoManifest(args.video_id, args.subject_id, label, str(out / "frames" / f"frame_*.{args.format}"),
                          str(out / "landmarks.csv"))
    write_manifest(out / "manifest.csv", [entry])
    print(f"wrote {args.frames} frames to {out}")


def cmd_fit(args):
    basis = _load_basis(args.basis)
    entries = read_manifest(args.manifest)
    if args.video_id:
        entries = [e for e in entries if e.video_id in set(args.video_id)]
        if not entries:
            raise DataError(f"no manifest row matches {args.video_id}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = FitConfig(max_iterations=args.iterations, seed=args.seed, workers=args.workers)
    dataset = []
    for e in entries:
        frames = load_video(e, crop=not args.no_crop)
        h, w = frames[0].image.shape[:2]
        t0 = time.perf_counter()
        res = fit_video(frames, basis, _camera(args, w, h), config)
        elapsed = time.perf_counter() - t0
        feats = export_features(res.state)
        feat_path = out / f"{e.video_id}.features.csv"
        write_features(feat_path, feats)
        best = res.history[res.best_iteration]
        report = {
            "video_id": e.video_id,
            "frames": len(frames),
            "frame_indices": [f.frame_index for f in frames],
            "iterations": res.iterations,
            "best_iteration": res.best_iteration,
            "best_energy": res.best_energy,
            "converged": res.converged,
            "per_frame": [None if b is None else {k: getattr(b, k) for k in ("e_land", "e_vert", "e_reg", "total", "visible_count", "valid_landmarks")}
                          for b in best],
        }
        if args.consistency_report:
            if len(frames) < 2:
                raise DataError(f"{e.video_id}: the consistency report needs at least two frames")
            shared = [res.state.assemble(f) for f in range(len(frames))]
            alone = independent_frame_fits(frames, basis, _camera(args, w, h), config)
            rs, ri = identity_consistency_report(shared), identity_consistency_report(alone)
            report["identity_consistency"] = {"shared": rs.as_dict(), "independent": ri.as_dict()}
            print(f"{e.video_id}: identity std shared {rs.mean_std:.6g}, independent {ri.mean_std:.6g}")
        (out / f"{e.video_id}.fit.json").write_text(json.dumps(report, indent=2) + "\n")
        dataset.append((e.video_id, e.subject_id, "" if e.label is None else e.label, feat_path.name))
        if res.warning:
            logger.warning("%s: iteration cap reached before convergence", e.video_id)
        logger.info("%s: %d frames, energy %.6g, %.1fs", e.video_id, len(frames), res.best_energy, elapsed)
        print(f"{e.video_id}: {len(frames)} frames -> {feat_path}")
    with open(out / "dataset.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "subject_id", "label", "features_path"])
        w.writerows(dataset)


def cmd_render_debug(args):
    basis = _load_basis(args.basis)
    feats = parse_features(args.features)
    if not 0 <= args.row < feats.shape[0]:
        raise DataError(f"{args.features}: row {args.row} out of range (have {feats.shape[0]})")
    code = CodeVector.from_array(feats[args.row].astype(np.float64))
    cam = _camera(args)
    mesh = build_mesh(basis, code)
    pose = RigidPose(code.omega, code.t)
    shading = shade_vertices(np.ones_like(mesh.reflectance), mesh.normals, code.omega, code.gamma)
    normals = 0.5 * (mesh.normals @ rotation_from_axis_angle(code.omega).T + 1.0)
    prefix = args.out_prefix
    outputs = {"recon": None, "shading": shading, "normals": normals}
    for name, colors in outputs.items():
        m = Mesh(mesh.positions, mesh.reflectance, mesh.normals, mesh.degenerate, colors, mesh.triangles)
        if args.splat:
            img, _ = render_pointsplat(m, pose, cam, code.gamma)
        else:
            img, _ = render_interpolated(m, pose, cam, code.gamma)
        write_image(f"{prefix}_{name}.ppm", img)
        print(f"wrote {prefix}_{name}.ppm")


def cmd_gradcheck(args):
    basis = _load_basis(args.basis) if args.basis else generate_synthetic_basis(args.seed, args.vertices)
    cam = _camera(args)
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    t0 = time.perf_counter()
    for k in range(args.cases):
        code, frame = gradcheck_case(basis, cam, rng)
        gc = gradient_check(code, basis, cam, frame)
        worst = max(worst, gc.max_relative_error)
        blocks = " ".join(f"{b}={e:.2e}" for b, e in gc.block_errors().items())
        print(f"case {k:2d}: max rel {gc.max_relative_error:.3e}  {blocks}")
    print(f"max relative error {worst:.3e} over {args.cases} cases ({time.perf_counter() - t0:.1f}s)")
    if not worst < args.tolerance:
        print(f"FAIL: exceeds tolerance {args.tolerance:g}")
        return EXIT_NUMERIC
    print("PASS")
    return EXIT_OK


def read_dataset(path, require_labels=True):
    """Rows ``video_id, subject_id, label, features_path`` as :class:`SequenceSample`."""
    path = Path(path)
    samples = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        need = {"video_id", "subject_id", "label", "features_path"}
        if not need <= set(reader.fieldnames or ()):
            raise DataError(f"{path}: dataset needs columns {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            lab = row["label"].strip()
            if lab not in ("0", "1"):
                if require_labels:
                    raise DataError(f"{path}:{lineno}: label must be 0 or 1")
                continue
            feats = parse_features(path.parent / row["features_path"].strip())
            if feats.shape[0] == 0:
                raise DataError(f"{path}:{lineno}: {row['features_path']} has no frames")
            samples.append(SequenceSample(feats.astype(np.float64), int(lab), row["video_id"], row["subject_id"]))
    if not samples:
        raise DataError(f"{path}: no labeled samples")
    return samples


def _train_config(args):
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed,
                       feature_standardization=not args.no_standardize)


def cmd_train(args):
    samples = read_dataset(args.dataset)
    try:
        res = train(samples, _train_config(args))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    save_model(args.out, res.model)
    for e, loss in enumerate(res.loss_history, start=1):
        print(f"epoch {e:2d}  loss {loss:.6f}")
    print(f"wrote {args.out}")


def cmd_predict(args):
    model = load_model(args.model)
    print("file,label,p_truth,p_deception")
    for f in args.features:
        feats = parse_features(f)
        if feats.shape[0] == 0:
            raise DataError(f"{f}: no frames")
        try:
            label, p = predict(model, feats.astype(np.float64))
        except ValueError as exc:
            raise DataError(f"{f}: {exc}") from exc
        print(f"{f},{label},{p[0]:.6f},{p[1]:.6f}")


def cmd_lopo_eval(args):
    samples = read_dataset(args.dataset)
    try:
        report = lopo_evaluate(samples, _train_config(args), iterations=args.iterations, n_validation=args.validation)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    for f in report.folds:
        if f.test is None:
            print(f"iter {f.iteration} subject {f.subject_id}: skipped ({f.skipped})")
            continue
        t = f.test
        print(f"iter {f.iteration} subject {f.subject_id}: acc {t.accuracy:.3f} prec {t.precision:.3f} "
              f"rec {t.recall:.3f} (tp {t.tp} fp {t.fp} tn {t.tn} fn {t.fn})")
    print(f"mean: acc {report.accuracy:.3f} prec {report.precision:.3f} rec {report.recall:.3f}")
    if args.out:
        Path(args.out).write_text(json.dumps(report.as_dict(), indent=2) + "\n")


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="facecode", description="Face code fitting and sequence classification.")
    p.add_argument("--backend", choices=["auto", "cython", "python"], default="auto", help="kernel backend")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=func)
        return sp

    def camera_args(sp):
        sp.add_argument("--width", type=int, default=224)
        sp.add_argument("--height", type=int, default=224)
        sp.add_argument("--focal", type=float, default=None, help="focal length in pixels (default 1.5*max(W,H))")

    def train_args(sp):
        sp.add_argument("--dataset", required=True, help="CSV: video_id,subject_id,label,features_path")
        sp.add_argument("--epochs", type=int, default=10)
        sp.add_argument("--batch-size", type=int, default=16)
        sp.add_argument("--lr", type=float, default=1e-3)
        sp.add_argument("--no-standardize", action="store_true")

    sp = add("gen-basis", cmd_gen_basis, "write a synthetic FMB1 basis")
    sp.add_argument("--out", required=True)
    sp.add_argument("--vertices", type=int, default=1000)

    sp = add("gen-synthetic", cmd_gen_synthetic, "render a synthetic video with ground truth")
    sp.add_argument("--basis", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--frames", type=int, default=5)
    sp.add_argument("--noise", type=float, default=0.0, help="pixel noise sigma")
    sp.add_argument("--video-id", default="synthetic")
    sp.add_argument("--subject-id", default="s0")
    sp.add_argument("--label", choices=["0", "1"], default=None)
    sp.add_argument("--format", choices=["png", "ppm"], default="png")
    camera_args(sp)

    sp = add("fit", cmd_fit, "fit every manifest video and export features")
    sp.add_argument("--basis", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--video-id", action="append", help="restrict to these videos (repeatable)")
    sp.add_argument("--iterations", type=int, default=500)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--no-crop", action="store_true", help="frames are already face crops")
    sp.add_argument("--consistency-report", action="store_true",
                    help="also fit each frame alone and report identity std for both fits")
    sp.add_argument("--focal", type=float, default=None)

    sp = add("render-debug", cmd_render_debug, "render reconstruction, shading and normals as PPM")
    sp.add_argument("--basis", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--row", type=int, default=0)
    sp.add_argument("--out-prefix", required=True)
    sp.add_argument("--splat", action="store_true", help="raw vertex splat instead of the dense render")
    camera_args(sp)

    sp = add("gradcheck", cmd_gradcheck, "analytic vs finite-difference gradient")
    sp.add_argument("--basis", default=None, help="FMB1 file (default: generate one)")
    sp.add_argument("--vertices", type=int, default=500)
    sp.add_argument("--cases", type=int, default=20)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    camera_args(sp)

    sp = add("train", cmd_train, "train the sequence classifier")
    train_args(sp)
    sp.add_argument("--out", required=True, help="FRNN1 checkpoint path")

    sp = add("predict", cmd_predict, "classify feature files")
    sp.add_argument("--model", required=True)
    sp.add_argument("features", nargs="+")

    sp = add("lopo-eval", cmd_lopo_eval, "leave-one-subject-out evaluation")
    train_args(sp)
    sp.add_argument("--iterations", type=int, default=1)
    sp.add_argument("--validation", type=int, default=5)
    sp.add_argument("--out", default=None, help="write the report as JSON")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.backend != "auto":
            kernels.use_backend(args.backend)
        code = args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, FloatingPointError, FitFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, BasisFormatError, CheckpointFormatError, DimensionError, DegenerateInputError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
