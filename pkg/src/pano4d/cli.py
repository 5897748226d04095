"""Pipeline driver.

Each subcommand runs one stage against a workspace directory; run-all
chains the full synthetic pipeline. Stages skip themselves when their
recorded settings, upstream records and outputs are all unchanged.

Exit codes: 0 success, 2 bad configuration or arguments, 3 a stage
failed, 4 the workspace lock is held by another run.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys

import numpy as np

from . import __version__
from .alignment import AlignConfig, OptimizationError, align_first_frame
from .curator import CuratorConfig, slice_video, write_manifest
from .field import save_field, softplus
from .geometry import icosahedron_rig, project
from .io import (
    FormatError,
    read_flo,
    read_frame_png,
    read_mask_png,
    read_pfm,
    read_rig_manifest,
    write_flo,
    write_frame_png,
    write_mask_png,
    write_pfm,
    write_rig_manifest,
)
from .lifting import attach_source_pixels, export_cloud, import_cloud, lift, render_pano
from .motion import block_matching_flow
from .oracle import DepthPerturbation, OracleScene, perturb_views, render_video
from .seam import alternating_blend, circular_crop, seam_metric
from .spacetime import align_video
from .warping import (
    build_training_rig,
    project_pano_depth,
    rig_coverage,
    supplementary_offsets,
    warp_view,
)
from .workspace import (
    RUN_ALL,
    LockHeld,
    RunConfig,
    StageError,
    Workspace,
    WorkspaceError,
    make_config,
    parse_config_file,
    workspace_lock,
)


def _alignment_rig(cfg: RunConfig):
    return icosahedron_rig(fov=cfg.view_fov, width=cfg.view_size,
                           height=cfg.view_size)


def _count_frames(ws: Workspace) -> int:
    count = len(sorted((ws.root / "frames").glob("frame_*.png")))
    if count == 0:
        raise StageError(f"no frames in {ws.root / 'frames'}; run synth or "
                         f"copy frame_0001.png ... into place")
    return count


def _load_video(ws: Workspace, count: int) -> np.ndarray:
    return np.stack([read_frame_png(ws.frame_path(l))
                     for l in range(1, count + 1)])


# Stages ----------------------------------------------------------------

def stage_synth(ws: Workspace, cfg: RunConfig) -> list[str]:
    scene = OracleScene(height=cfg.height, frames=cfg.frames, seed=cfg.seed,
                        with_object=cfg.with_object)
    video, depths, flows = render_video(scene)
    outputs = []
    for l in range(1, cfg.frames + 1):
        write_frame_png(ws.frame_path(l), video[l - 1])
        write_pfm(ws.gt_depth_path(l), depths[l - 1])
        outputs += [ws.rel(ws.frame_path(l)), ws.rel(ws.gt_depth_path(l))]
    for l in range(1, cfg.frames):
        write_flo(ws.flow_path(l), flows[l - 1])
        outputs.append(ws.rel(ws.flow_path(l)))
    return outputs


def stage_curate(ws: Workspace, cfg: RunConfig) -> list[str]:
    count = _count_frames(ws)
    video = _load_video(ws, count)
    manifest = slice_video(video, CuratorConfig(
        sample_interval=cfg.sample_interval, theta_trans=cfg.theta_trans,
        theta_count=cfg.theta_count, discard_margin=cfg.discard_margin,
        min_clip_len=cfg.min_clip_len), video_id=cfg.video_id)
    path = ws.root / "curate" / "manifest.txt"
    write_manifest(path, [manifest])
    print(f"curate: {len(manifest.clips)} clips, "
          f"{len(manifest.keyframes)} keyframes")
    return [ws.rel(path)]


def stage_project(ws: Workspace, cfg: RunConfig) -> list[str]:
    rig = _alignment_rig(cfg)
    count = _count_frames(ws)
    outputs = []
    for l in range(1, count + 1):
        frame = read_frame_png(ws.frame_path(l))
        for i, cam in enumerate(rig):
            rgb_path = ws.root / "views" / f"view_{i:02d}" / f"rgb_{l:04d}.png"
            rgb_path.parent.mkdir(parents=True, exist_ok=True)
            write_frame_png(rgb_path, project(frame, cam))
            outputs.append(ws.rel(rgb_path))
        if cfg.external_depth:
            src = os.path.join(cfg.external_depth,
                               "view_%02d", "depth_%04d.pfm")
            for i, cam in enumerate(rig):
                d = read_pfm(src % (i, l))
                if cfg.disparity:
                    d = 1.0 / np.maximum(d, 1e-4)
                if d.shape != (cam.height, cam.width):
                    raise StageError(
                        f"external depth for view {i} frame {l} has shape "
                        f"{d.shape}, the rig camera is {cam.height}x{cam.width}")
                write_pfm(ws.view_depth_path(i, l), d)
                outputs.append(ws.rel(ws.view_depth_path(i, l)))
        else:
            gt = read_pfm(ws.gt_depth_path(l))
            pert = DepthPerturbation(
                scale_range=(cfg.scale_min, cfg.scale_max),
                shift_range=(cfg.shift_min, cfg.shift_max),
                noise_sigma=cfg.noise_sigma, seed=cfg.seed + l)
            views = perturb_views(gt, rig, pert)
            for i in range(len(rig)):
                write_pfm(ws.view_depth_path(i, l), views.depths[i])
                outputs.append(ws.rel(ws.view_depth_path(i, l)))
    return outputs


def stage_flow(ws: Workspace, cfg: RunConfig) -> list[str]:
    count = _count_frames(ws)
    paths = [ws.flow_path(l) for l in range(1, count)]
    if all(p.exists() for p in paths):
        return [ws.rel(p) for p in paths]
    video = _load_video(ws, count)
    for l, path in enumerate(paths, 1):
        flow = block_matching_flow(video[l - 1], video[l],
                                   block=cfg.block, search=cfg.search)
        write_flo(path, flow)
    return [ws.rel(p) for p in paths]


def _align_config(cfg: RunConfig) -> AlignConfig:
    return AlignConfig(
        iterations=cfg.iterations, shift_delay=cfg.shift_delay,
        frame_iterations=cfg.frame_iterations, rays_per_step=cfg.rays_per_step,
        learning_rate=cfg.learning_rate, lambda_depth=cfg.lambda_depth,
        lambda_scale=cfg.lambda_scale, lambda_shift=cfg.lambda_shift,
        lambda_first=cfg.lambda_first, lambda_pre=cfg.lambda_pre,
        tau_flow=cfg.tau_flow, seed=cfg.seed, hidden=cfg.hidden,
        layers=cfg.layers, octaves=cfg.octaves)


def stage_align_first(ws: Workspace, cfg: RunConfig) -> list[str]:
    rig = _alignment_rig(cfg)
    frame = read_frame_png(ws.frame_path(1))
    depths = [read_pfm(ws.view_depth_path(i, 1)) for i in range(len(rig))]
    result = align_first_frame(frame, depths, rig, _align_config(cfg))
    write_pfm(ws.depth_path(1), result.depth)
    alphas = np.array([a.alpha for a in result.affines], np.float32)
    betas = np.stack([a.beta for a in result.affines]).astype(np.float32)
    save_field(ws.field_path(1), result.field, alphas, betas)
    log = ws.align_log_path()
    log.write_text(
        f"frame=1 views={len(rig)} skipped=0 unsupervised=0 "
        f"loss={result.history[-1, 0]:.6f}\n", encoding="ascii")
    print(f"align-first: loss {result.history[0, 0]:.4f} -> "
          f"{result.history[-1, 0]:.4f}")
    return [ws.rel(ws.depth_path(1)), ws.rel(ws.field_path(1)), ws.rel(log)]


def stage_align(ws: Workspace, cfg: RunConfig) -> list[str]:
    rig = _alignment_rig(cfg)
    count = _count_frames(ws)
    video = _load_video(ws, count)
    flows = [read_flo(ws.flow_path(l)) for l in range(1, count)]

    def provider(frame_index: int, view_index: int) -> np.ndarray:
        return read_pfm(ws.view_depth_path(view_index, frame_index))

    result = align_video(video, provider, flows, rig, _align_config(cfg))
    outputs = []
    for l in range(1, count + 1):
        write_pfm(ws.depth_path(l), result.depths[l - 1])
        outputs.append(ws.rel(ws.depth_path(l)))

    alphas = np.array([a.alpha for a in result.first.affines], np.float32)
    betas = np.stack([a.beta for a in result.first.affines]).astype(np.float32)
    save_field(ws.field_path(1), result.first.field, alphas, betas)
    outputs.append(ws.rel(ws.field_path(1)))
    for fr in result.frames:
        save_field(ws.field_path(fr.frame_index), fr.field)
        outputs.append(ws.rel(ws.field_path(fr.frame_index)))

    if result.regions:
        for l, region in enumerate(result.regions, 1):
            write_mask_png(ws.region_path(l), region)
            outputs.append(ws.rel(ws.region_path(l)))
        write_mask_png(ws.union_path(), result.union)
        outputs.append(ws.rel(ws.union_path()))

    log = ws.align_log_path()
    lines = [
        f"frame={entry['frame']} views={entry['views']} "
        f"skipped={int(entry['skipped'])} unsupervised={entry['unsupervised']} "
        f"loss={entry['loss']:.6f}"
        for entry in result.logs
    ]
    log.write_text("\n".join(lines) + "\n", encoding="ascii")
    outputs.append(ws.rel(log))
    for line in lines:
        print(f"align: {line}")
    return outputs


def stage_lift(ws: Workspace, cfg: RunConfig) -> list[str]:
    count = _count_frames(ws)
    video = _load_video(ws, count)
    depths = np.stack([read_pfm(ws.depth_path(l)) for l in range(1, count + 1)])
    if count > 1:
        regions = [read_mask_png(ws.region_path(l)) for l in range(1, count + 1)]
    else:
        regions = [np.zeros(video.shape[1:3], bool)]
    cloud, report = lift(video, depths, regions, tau_std=cfg.tau_std)
    export_cloud(ws.cloud_path(), cloud)
    meta = {
        "points": len(cloud), "dropped": report.dropped,
        "std_pixels": report.std_mask_pixels, "tau_std": cfg.tau_std,
        "height": video.shape[1], "width": video.shape[2], "frames": count,
    }
    lines = [f"{k}={meta[k]}" for k in sorted(meta)]
    ws.cloud_meta_path().write_text("\n".join(lines) + "\n", encoding="ascii")
    print(f"lift: {len(cloud)} points, {report.dropped} dropped")
    return [ws.rel(ws.cloud_path()), ws.rel(ws.cloud_meta_path())]


def stage_rig(ws: Workspace, cfg: RunConfig) -> list[str]:
    rig = build_training_rig(width=cfg.rig_size, height=cfg.rig_size,
                             ring_fov=cfg.ring_fov, ico_fov=cfg.ico_fov)
    coverage = rig_coverage(rig.cameras)
    if coverage < 1.0:
        print(f"rig: warning: coverage {coverage:.6f} < 1", file=sys.stderr)
    write_rig_manifest(ws.rig_manifest_path(), list(rig.cameras))
    print(f"rig: {len(rig.cameras)} cameras, coverage {coverage:.6f}")
    return [ws.rel(ws.rig_manifest_path())]


def stage_warp(ws: Workspace, cfg: RunConfig) -> list[str]:
    cameras = read_rig_manifest(ws.rig_manifest_path())
    pano = read_frame_png(ws.frame_path(1))
    pano_depth = read_pfm(ws.depth_path(1))
    offsets = supplementary_offsets(cfg.warp_offset)
    outputs = []
    for cam in cameras:
        cam_dir = ws.rig_cam_dir(cam.name)
        cam_dir.mkdir(parents=True, exist_ok=True)
        image = project(pano, cam)
        depth = project_pano_depth(pano_depth, cam)
        write_frame_png(cam_dir / "rgb.png", image)
        write_pfm(cam_dir / "depth.pfm", depth)
        outputs += [ws.rel(cam_dir / "rgb.png"), ws.rel(cam_dir / "depth.pfm")]
        for tag, offset in offsets.items():
            warped = warp_view(image, depth, cam, offset)
            write_frame_png(cam_dir / f"warp_{tag}.png", warped.image)
            write_mask_png(cam_dir / f"valid_{tag}.png", warped.valid)
            outputs += [ws.rel(cam_dir / f"warp_{tag}.png"),
                        ws.rel(cam_dir / f"valid_{tag}.png")]
    return outputs


def stage_seam(ws: Workspace, cfg: RunConfig) -> list[str]:
    count = _count_frames(ws)
    video = _load_video(ws, count)
    color_gap, gradient_gap = seam_metric(video)
    lines = [f"color_gap={color_gap!r}", f"gradient_gap={gradient_gap!r}"]
    outputs = []
    if cfg.blend_steps > 0:
        if video.shape[2] % 16 != 0:
            raise WorkspaceError(
                f"blend needs a width divisible by 16, frames are "
                f"{video.shape[2]} wide")
        blended = []
        for l in range(count):
            frame = video[l]
            for step in range(cfg.blend_steps):
                frame = alternating_blend(frame, step)
            cropped = circular_crop(frame)
            path = ws.root / "seam" / f"frame_{l + 1:04d}.png"
            write_frame_png(path, cropped)
            outputs.append(ws.rel(path))
            blended.append(cropped)
        after = seam_metric(np.stack(blended))
        lines += [f"color_gap_after={after[0]!r}",
                  f"gradient_gap_after={after[1]!r}"]
    metric_path = ws.root / "seam" / "metric.txt"
    metric_path.write_text("\n".join(lines) + "\n", encoding="ascii")
    print(f"seam: color_gap {color_gap:.6f} gradient_gap {gradient_gap:.6f}")
    return [ws.rel(metric_path)] + outputs


def stage_render(ws: Workspace, cfg: RunConfig) -> list[str]:
    meta = {}
    for line in ws.cloud_meta_path().read_text(encoding="ascii").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    height, width = int(meta["height"]), int(meta["width"])
    count = int(meta["frames"])
    cloud = import_cloud(ws.cloud_path())
    cloud = attach_source_pixels(cloud, height, width)
    outputs = []
    for l in range(1, count + 1):
        t = 0.0 if count == 1 else (l - 1) / (count - 1)
        frame, valid = render_pano(cloud, height, width, t)
        write_frame_png(ws.render_path(l), frame)
        write_mask_png(ws.render_valid_path(l), valid)
        outputs += [ws.rel(ws.render_path(l)), ws.rel(ws.render_valid_path(l))]
    return outputs


STAGES = {
    "synth": stage_synth,
    "curate": stage_curate,
    "project": stage_project,
    "flow": stage_flow,
    "align": stage_align,
    "lift": stage_lift,
    "rig": stage_rig,
    "warp": stage_warp,
    "seam": stage_seam,
    "render": stage_render,
}

# subcommand name -> stage record name
COMMANDS = {
    "synth": "synth",
    "curate": "curate",
    "project": "project",
    "flow": "flow",
    "align-video": "align",
    "lift": "lift",
    "rig": "rig",
    "warp": "warp",
    "seam": "seam",
    "render": "render",
}


def run_stage(ws: Workspace, name: str, cfg: RunConfig, force: bool) -> bool:
    """Run one recorded stage unless it is fresh. Returns True if it ran."""
    if not force and ws.stage_fresh(name, cfg):
        print(f"{name}: up to date")
        return False
    outputs = STAGES[name](ws, cfg)
    ws.write_record(name, cfg, outputs)
    print(f"{name}: ok ({len(outputs)} files)")
    return True


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pano4d",
        description="panoramic space-time reconstruction pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("workspace", help="workspace directory")
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting; repeatable")
    common.add_argument("--force", action="store_true",
                        help="re-run the stage even if it is up to date")
    common.add_argument("--external-depth", metavar="DIR",
                        help="read per-view depth from DIR instead of "
                             "perturbing ground truth")
    common.add_argument("--disparity", action="store_true",
                        help="external maps are disparity; invert them")
    helps = {
        "synth": "render the synthetic scene into the workspace",
        "curate": "slice the frames into transition-free clips",
        "project": "project frames into the view rig and make raw depth",
        "flow": "adopt existing flow files or run block matching",
        "align-first": "align frame 1 only (diagnostic)",
        "align-video": "align the whole video into consistent depth",
        "lift": "lift frames and depth into a 4D point cloud",
        "rig": "write the training camera rig manifest",
        "warp": "render rig views and depth-warped supplements",
        "seam": "measure (and optionally blend) the wrap seam",
        "render": "re-render the video from the point cloud",
        "run-all": "run the full synthetic pipeline in order",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise WorkspaceError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.external_depth:
        overrides["external_depth"] = args.external_depth
    if args.disparity:
        overrides["disparity"] = "true"
    return make_config(file_values, overrides)


@contextlib.contextmanager
def _thread_limits():
    """Honor PANO4D_THREADS via threadpoolctl when both are present."""
    value = os.environ.get("PANO4D_THREADS")
    if not value:
        yield
        return
    try:
        limit = int(value)
    except ValueError:
        raise WorkspaceError(f"PANO4D_THREADS must be an integer, got {value!r}")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        print("warning: PANO4D_THREADS set but threadpoolctl is not "
              "installed", file=sys.stderr)
        yield
        return
    with threadpool_limits(limits=limit):
        yield


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except (WorkspaceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    ws = Workspace(args.workspace)
    try:
        with workspace_lock(ws.root), _thread_limits():
            ws.ensure()
            if args.command == "run-all":
                for name in RUN_ALL:
                    run_stage(ws, name, cfg, args.force)
            elif args.command == "align-first":
                # diagnostic; records nothing so align-video stays authoritative
                stage_align_first(ws, cfg)
            else:
                run_stage(ws, COMMANDS[args.command], cfg, args.force)
            ws.write_manifest()
    except LockHeld as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except WorkspaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StageError, OptimizationError, FormatError, OSError) as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
