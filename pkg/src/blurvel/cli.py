"""Batch command-line frontend.

Subcommands: ``synth`` (dataset synthesis), ``solve`` (twist + velocity per
sample), ``disambiguate`` (direction selection for one sample), ``eval``
(per-axis RMSE + error CDFs), and ``gradcheck`` (analytic vs numerical
solver gradients).

Exit codes: 0 success, 2 config error, 3 degenerate geometry, 4 I/O error.
The only environment variable honored is ``BLURVEL_THREADS`` (parallel
reduction width inside the solver; results are independent of it).
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import blur, config, disambiguation, evaluation, motion_field, scenes, solver
from .geometry import Intrinsics, Pose, Twist

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEGENERATE = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blurvel",
        description="Camera velocity from motion blur: synthesis, solving, "
        "disambiguation, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="synthesize a blurred dataset from a config file")
    p_synth.add_argument("config", help="key = value config file")
    p_synth.add_argument("--out", required=True, help="output dataset directory")
    p_synth.add_argument("--workers", type=int, default=1, help="parallel sample workers")

    p_solve = sub.add_parser("solve", help="recover twists/velocities for dataset samples")
    p_solve.add_argument("manifest", help="sample manifest, dataset.json, or dataset directory")
    p_solve.add_argument("--out", required=True, help="directory for per-sample report JSON")
    p_solve.add_argument("--stride", type=int, default=1, help="pixel sampling stride (default 1)")
    p_solve.add_argument("--exposure", type=float, default=None,
                         help="override the manifest exposure time (seconds)")
    p_solve.add_argument("--workers", type=int, default=1, help="parallel sample workers")

    p_dis = sub.add_parser("disambiguate", help="resolve the motion direction of one sample")
    p_dis.add_argument("manifest", help="sample manifest with neighbor frames")
    p_dis.add_argument("--out", default=None, help="optional output JSON path")
    p_dis.add_argument("--tie-break", choices=["forward", "backward"], default="forward")
    p_dis.add_argument("--photometric", choices=["rgb", "luma"], default="rgb")

    p_eval = sub.add_parser("eval", help="per-axis velocity RMSE and error CDFs")
    p_eval.add_argument("pred", help="directory of solve report JSON files")
    group = p_eval.add_mutually_exclusive_group(required=True)
    group.add_argument("--gt-manifest", help="dataset directory with ground-truth twists")
    group.add_argument("--gt-tum", help="TUM trajectory; velocities by finite differences")
    p_eval.add_argument("--out", required=True, help="output directory")
    p_eval.add_argument("--tolerance", type=float, default=1e-3,
                        help="timestamp matching tolerance in seconds")

    p_grad = sub.add_parser("gradcheck", help="check solver gradients against finite differences")
    p_grad.add_argument("--systems", type=int, default=20)
    p_grad.add_argument("--height", type=int, default=8)
    p_grad.add_argument("--width", type=int, default=8)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--step", type=float, default=1e-5, help="relative FD step")
    p_grad.add_argument("--tol", type=float, default=1e-5, help="max relative error accepted")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "solve": cmd_solve,
        "disambiguate": cmd_disambiguate,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except solver.DegenerateGeometryError as exc:
        print(f"degenerate geometry: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (FileNotFoundError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# synth


def _synthesize_sample(
    cfg: config.SynthConfig,
    intrinsics: Intrinsics,
    rng: np.random.Generator,
    index: int,
    sample_dir: Path,
    shared_depth,
    tum_window: tuple | None,
) -> str:
    sample_dir.mkdir(parents=True, exist_ok=True)
    if shared_depth is not None:
        depth = shared_depth
    else:
        depth = scenes.procedural_depth(rng, cfg.height, cfg.width, cfg.depth_min, cfg.depth_max)
    texture = scenes.procedural_texture(rng, cfg.height, cfg.width)

    if tum_window is None:
        twist = scenes.random_twist(rng, cfg.max_rotation_rad, cfg.max_translation_m)
        span = cfg.key_frames - 1
        key_poses = [twist.scaled(k / span).to_pose() for k in range(cfg.key_frames)]
        gap_ratio = cfg.frame_gap_s / cfg.exposure_s
        prev_pose = twist.scaled(-gap_ratio).to_pose()
        next_pose = twist.scaled(1.0 + gap_ratio).to_pose()
        exposure_s = cfg.exposure_s
        gap_prev_s = gap_next_s = cfg.frame_gap_s
        timestamp = index * cfg.frame_gap_s
    else:
        window_times, window_poses, neighbors = tum_window
        key_poses = window_poses
        exposure_s = float(window_times[-1] - window_times[0])
        prev_pose, gap_prev_s, next_pose, gap_next_s = neighbors
        timestamp = float(window_times[0])

    frames = blur.interpolate_virtual_frames(key_poses, depth, texture, cfg.per_gap, intrinsics)
    blurred = blur.composite_blur(frames)
    flow_fw, flow_bw, depth_label, twist_label = blur.ground_truth_labels(
        frames, depth, intrinsics
    )

    blur.save_image_png(sample_dir / "blurred.png", blurred)
    blur.save_image_png(sample_dir / "sharp.png", texture)
    motion_field.save_flow(sample_dir / "flow_fw.bvfl", flow_fw)
    motion_field.save_flow(sample_dir / "flow_bw.bvfl", flow_bw)
    motion_field.save_depth(sample_dir / "depth.bvdp", depth_label)

    manifest = {
        "blurred": "blurred.png",
        "sharp": "sharp.png",
        "flow_fw": "flow_fw.bvfl",
        "flow_bw": "flow_bw.bvfl",
        "depth": "depth.bvdp",
        "twist_t": twist_label.linear.tolist(),
        "twist_theta": twist_label.angular.tolist(),
        "exposure_s": exposure_s,
        "intrinsics": "../intrinsics.txt",
        "timestamp_s": timestamp,
        "direction": "forward",
    }
    if prev_pose is not None and next_pose is not None:
        prev_img, _ = blur.render_view(texture, depth, intrinsics, key_poses[0], prev_pose)
        next_img, _ = blur.render_view(texture, depth, intrinsics, key_poses[0], next_pose)
        blur.save_image_png(sample_dir / "prev.png", prev_img)
        blur.save_image_png(sample_dir / "next.png", next_img)
        manifest["frame_prev"] = "prev.png"
        manifest["frame_next"] = "next.png"
        manifest["gap_prev_s"] = gap_prev_s
        manifest["gap_next_s"] = gap_next_s
    blur.write_sample_manifest(sample_dir / "manifest.json", manifest)
    return str(sample_dir.name / Path("manifest.json"))


def _tum_windows(cfg: config.SynthConfig) -> list[tuple]:
    times, poses = evaluation.load_tum(cfg.trajectory_file)
    windows = []
    for segment in blur.split_on_pose_jumps(times, poses):
        k = cfg.key_frames
        start = 0
        while start + k <= len(segment) and len(windows) < cfg.samples:
            idx = segment[start : start + k]
            window_times = times[idx]
            window_poses = [poses[i] for i in idx]
            prev_pose = gap_prev = next_pose = gap_next = None
            pos = segment.index(idx[0])
            if pos > 0:
                prev_pose = poses[segment[pos - 1]]
                gap_prev = float(window_times[0] - times[segment[pos - 1]])
            tail = segment.index(idx[-1])
            if tail + 1 < len(segment):
                next_pose = poses[segment[tail + 1]]
                gap_next = float(times[segment[tail + 1]] - window_times[-1])
            if prev_pose is None or next_pose is None:
                neighbors = (None, None, None, None)
            else:
                neighbors = (prev_pose, gap_prev, next_pose, gap_next)
            windows.append((window_times, window_poses, neighbors))
            start += k
    if not windows:
        raise config.ConfigError("TUM trajectory yields no usable pose windows")
    return windows


def cmd_synth(args) -> int:
    cfg = config.SynthConfig.from_file(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    intrinsics = Intrinsics(
        cfg.focal_px, cfg.focal_px,
        (cfg.width - 1) / 2.0, (cfg.height - 1) / 2.0,
        cfg.width, cfg.height,
    )
    intrinsics.to_file(out / "intrinsics.txt")
    (out / "resolved.cfg").write_text(cfg.to_text(), encoding="utf-8")

    shared_depth = None
    if cfg.depth_source == "file":
        shared_depth = motion_field.load_depth(cfg.depth_file)
        if shared_depth.shape != (cfg.height, cfg.width):
            raise config.ConfigError(
                f"depth file grid {shared_depth.shape} does not match config "
                f"{cfg.height}x{cfg.width}"
            )

    tum_windows = _tum_windows(cfg) if cfg.trajectory == "tum" else None
    count = len(tum_windows) if tum_windows is not None else cfg.samples
    children = np.random.SeedSequence(cfg.seed).spawn(count)

    def _run(i: int) -> str:
        rng = np.random.default_rng(children[i])
        window = tum_windows[i] if tum_windows is not None else None
        return _synthesize_sample(
            cfg, intrinsics, rng, i, out / f"sample_{i:04d}", shared_depth, window
        )

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            rel_paths = list(pool.map(_run, range(count)))
    else:
        rel_paths = [_run(i) for i in range(count)]

    _write_json(out / "dataset.json", {"samples": rel_paths, "seed": cfg.seed})
    print(f"wrote {count} samples to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve


def _resolve_sample_manifests(path: Path) -> list[Path]:
    if path.is_dir():
        path = path / "dataset.json"
    if path.name == "dataset.json":
        with open(path, "r", encoding="utf-8") as fh:
            dataset = json.load(fh)
        return [path.parent / rel for rel in dataset["samples"]]
    return [path]


def _load_sample_inputs(manifest_path: Path):
    manifest = blur.read_sample_manifest(manifest_path)
    base = manifest_path.parent
    flow = motion_field.load_flow(base / manifest["flow_fw"])
    depth = motion_field.load_depth(base / manifest["depth"])
    intrinsics = Intrinsics.from_file((base / manifest["intrinsics"]).resolve())
    return manifest, flow, depth, intrinsics


def cmd_solve(args) -> int:
    manifests = _resolve_sample_manifests(Path(args.manifest))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def _run(manifest_path: Path):
        manifest, flow, depth, intrinsics = _load_sample_inputs(manifest_path)
        exposure = args.exposure if args.exposure is not None else manifest["exposure_s"]
        try:
            system = solver.accumulate_system(flow, depth, intrinsics, stride=args.stride)
            report = solver.solve_twist(system)
        except solver.DegenerateGeometryError as exc:
            return manifest_path, None, exc
        payload = report.to_json_dict(exposure)
        if "timestamp_s" in manifest:
            payload["timestamp_s"] = manifest["timestamp_s"]
        name = manifest_path.parent.name or manifest_path.stem
        _write_json(out / f"{name}.json", payload)
        return manifest_path, payload, None

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_run, manifests))
    else:
        results = [_run(m) for m in manifests]

    failures = 0
    for manifest_path, payload, error in results:
        if error is not None:
            failures += 1
            print(f"{manifest_path}: DEGENERATE ({error})", file=sys.stderr)
        else:
            print(f"{manifest_path}: residual {payload['residual_rms_px']:.3e} px, "
                  f"{payload['pixels_used']} px")
    return EXIT_DEGENERATE if failures else EXIT_OK


# ---------------------------------------------------------------------------
# disambiguate


def cmd_disambiguate(args) -> int:
    manifest_path = Path(args.manifest)
    manifest, flow_fw_unused, depth_unused, _ = _load_sample_inputs(manifest_path)
    base = manifest_path.parent
    if "frame_prev" not in manifest or "frame_next" not in manifest:
        raise config.ConfigError(f"{manifest_path} has no neighbor frames to disambiguate with")
    frame_cur = blur.load_image_png(base / manifest["blurred"])
    frame_prev = blur.load_image_png(base / manifest["frame_prev"])
    frame_next = blur.load_image_png(base / manifest["frame_next"])
    flow_fw = motion_field.load_flow(base / manifest["flow_fw"])
    flow_bw = motion_field.load_flow(base / manifest["flow_bw"])
    twist_fw = Twist(np.array(manifest["twist_t"]), np.array(manifest["twist_theta"]))
    result = disambiguation.disambiguate(
        frame_prev, frame_cur, frame_next,
        flow_fw, flow_bw,
        manifest["exposure_s"], manifest["gap_prev_s"], manifest["gap_next_s"],
        twist_fw, twist_fw.inverse(),
        photometric=args.photometric,
        tie_break=args.tie_break,
    )
    payload = {
        "direction": result.direction,
        "error_forward": result.error_forward,
        "error_backward": result.error_backward,
        "twist_t": result.twist.linear.tolist(),
        "twist_theta": result.twist.angular.tolist(),
    }
    if args.out:
        _write_json(Path(args.out), payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _pred_series(pred_dir: Path) -> evaluation.VelocitySeries:
    reports = sorted(pred_dir.glob("*.json"))
    records = []
    for path in reports:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if "timestamp_s" not in payload:
            raise ValueError(f"{path} has no timestamp_s; cannot align for evaluation")
        records.append((payload["timestamp_s"], payload["omega"], payload["v"]))
    if not records:
        raise ValueError(f"no prediction JSON files in {pred_dir}")
    records.sort(key=lambda r: r[0])
    times = np.array([r[0] for r in records])
    omega = np.array([r[1] for r in records])
    v = np.array([r[2] for r in records])
    return evaluation.VelocitySeries(times, omega, v)


def _gt_series_from_manifest(dataset_dir: Path) -> evaluation.VelocitySeries:
    records = []
    for manifest_path in _resolve_sample_manifests(dataset_dir):
        manifest = blur.read_sample_manifest(manifest_path)
        twist = Twist(np.array(manifest["twist_t"]), np.array(manifest["twist_theta"]))
        omega, v = solver.twist_to_velocity(twist, manifest["exposure_s"])
        records.append((manifest["timestamp_s"], omega, v))
    records.sort(key=lambda r: r[0])
    times = np.array([r[0] for r in records])
    omega = np.array([r[1] for r in records])
    v = np.array([r[2] for r in records])
    return evaluation.VelocitySeries(times, omega, v)


def cmd_eval(args) -> int:
    pred = _pred_series(Path(args.pred))
    if args.gt_manifest:
        gt = _gt_series_from_manifest(Path(args.gt_manifest))
    else:
        times, poses = evaluation.load_tum(args.gt_tum)
        gt = evaluation.finite_difference_velocity(times, poses)
    report = evaluation.rmse_per_axis(pred, gt, tolerance_s=args.tolerance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_eval_report(out / "report.json", report)
    cdfs = evaluation.export_cdf(report)
    evaluation.write_cdf_csv(out / "omega_cdf.csv", cdfs["omega"])
    evaluation.write_cdf_csv(out / "v_cdf.csv", cdfs["v"])
    print(f"matched {report.matched} frames "
          f"({report.unmatched_pred} pred / {report.unmatched_gt} gt unmatched)")
    print(f"rmse omega [rad/s]: {report.rmse_angular}")
    print(f"rmse v     [m/s]:  {report.rmse_linear}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def gradcheck(
    systems: int = 20,
    height: int = 8,
    width: int = 8,
    seed: int = 0,
    step: float = 1e-5,
    tol: float = 1e-5,
    verbose: bool = False,
) -> float:
    """Compare the solver's flow/depth vector-Jacobian products against
    central finite differences on seeded toy scenes; returns the worst
    relative error across all perturbed coordinates."""
    from .geometry import DepthMap, FlowField

    root = np.random.SeedSequence(seed).spawn(systems)
    worst = 0.0
    for k in range(systems):
        rng = np.random.default_rng(root[k])
        intrinsics = Intrinsics(width + 2.0, width + 2.0, (width - 1) / 2.0,
                                (height - 1) / 2.0, width, height)
        depth_values = rng.uniform(0.5, 4.0, size=(height, width))
        twist = scenes.random_twist(rng, 0.03, 0.05)
        depth = DepthMap.from_values(depth_values)
        base_flow = motion_field.flow_from_twist(twist, depth, intrinsics)
        noisy = base_flow.vectors + rng.normal(scale=0.05, size=base_flow.vectors.shape)
        flow = FlowField(noisy, base_flow.valid)
        adjoint = rng.normal(size=6)

        flow_grad, depth_grad = solver.solution_gradients(flow, depth, intrinsics, adjoint)

        def objective(flow_vectors, depths) -> float:
            system = solver.accumulate_system(
                FlowField(flow_vectors, flow.valid),
                DepthMap(depths, depth.valid),
                intrinsics,
            )
            report = solver.solve_twist(system)
            return float(adjoint @ report.twist.as_vector())

        system_worst = 0.0
        for (i, j, c), analytic in np.ndenumerate(flow_grad):
            h = step * max(1.0, abs(flow.vectors[i, j, c]))
            plus = flow.vectors.copy()
            minus = flow.vectors.copy()
            plus[i, j, c] += h
            minus[i, j, c] -= h
            numeric = (objective(plus, depth.values) - objective(minus, depth.values)) / (2 * h)
            system_worst = max(system_worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
        for (i, j), analytic in np.ndenumerate(depth_grad):
            h = step * max(1.0, abs(depth.values[i, j]))
            plus = depth.values.copy()
            minus = depth.values.copy()
            plus[i, j] += h
            minus[i, j] -= h
            numeric = (objective(flow.vectors, plus) - objective(flow.vectors, minus)) / (2 * h)
            system_worst = max(system_worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
        worst = max(worst, system_worst)
        if verbose:
            status = "ok" if system_worst <= tol else "FAIL"
            print(f"system {k:2d}: max relative error {system_worst:.3e} [{status}]")
    return worst


def cmd_gradcheck(args) -> int:
    worst = gradcheck(
        systems=args.systems,
        height=args.height,
        width=args.width,
        seed=args.seed,
        step=args.step,
        tol=args.tol,
        verbose=True,
    )
    print(f"worst relative error over {args.systems} systems: {worst:.3e} (tolerance {args.tol:.1e})")
    if worst <= args.tol:
        print("gradcheck PASS")
        return EXIT_OK
    print("gradcheck FAIL")
    return 1


if __name__ == "__main__":
    sys.exit(main())
