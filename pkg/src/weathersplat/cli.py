"""Batch command-line entry points.

Exit codes: 0 on success, 1 on input/validation errors, 2 on runtime
failures. Commands that write multiple outputs remove partial results when
they fail.
"""
from __future__ import annotations

import sys
from pathlib import Path

import click
import torch
import yaml

from . import io as sio
from .losses import psnr, ssim
from .rasterizer import composite_sky, project, rasterize
from .scene import RAW_WEATHER
from .synthetic import make_synthetic
from .timeline import TimelineRunner, WeatherTimeline
from .training import TrainingConfig, render_frame, train
from .weather import apply_fog

INPUT_ERROR = 1
RUNTIME_ERROR = 2


def _setup_threads(threads: int | None, deterministic: bool) -> None:
    if deterministic:
        torch.set_num_threads(1)
    elif threads:
        torch.set_num_threads(threads)


@click.group()
def main():
    """Multi-weather Gaussian splatting toolkit."""


@main.command("render")
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--cameras", "cameras_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="YAML file with a 'cameras' list; each entry may carry a 'frame' index.")
@click.option("--weather", default=None, help="Weather label override (else timeline/raw).")
@click.option("--timeline", "timeline_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--width", type=int, default=None, help="Override camera width (scales intrinsics).")
@click.option("--height", type=int, default=None, help="Override camera height (scales intrinsics).")
@click.option("--save-depth", is_flag=True, help="Also write f32 depth rasters.")
@click.option("--seed", type=int, default=0)
@click.option("--threads", type=int, default=None)
@click.option("--deterministic", is_flag=True, help="Single-threaded bitwise-reproducible mode.")
def cmd_render(scene_path, cameras_path, weather, timeline_path, out_dir, width, height,
               save_depth, seed, threads, deterministic):
    """Render a camera sequence: flatten + particles -> rasterize -> sky -> fog."""
    _setup_threads(threads, deterministic)
    written: list[Path] = []
    try:
        graph = sio.load_scene(scene_path)
        cameras_doc = yaml.safe_load(Path(cameras_path).read_text())
        if not isinstance(cameras_doc, dict) or "cameras" not in cameras_doc:
            raise sio.FormatError(f"{cameras_path}: expected a 'cameras' list")
        entries = cameras_doc["cameras"]
        timeline = WeatherTimeline.from_file(timeline_path) if timeline_path else WeatherTimeline()
        timeline.validate(len(entries))
        if weather:
            timeline.weather = weather
        if timeline.weather not in graph.decoders:
            raise sio.FormatError(f"weather {timeline.weather!r} not in scene "
                                  f"(has {sorted(graph.decoders)})")
        for settings in (timeline.rain, timeline.snow):
            if settings.enabled and settings.seed == 0:
                settings.seed = seed
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(INPUT_ERROR)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runner = TimelineRunner(graph, timeline)
    try:
        with torch.no_grad():
            for i, entry in enumerate(entries):
                camera = sio.camera_from_dict(entry["camera"] if "camera" in entry else entry)
                if width or height:
                    camera = _rescale_camera(camera, width, height)
                frame = int(entry.get("frame", min(i, graph.frame_count - 1)))
                runner.advance(i)
                rendered = render_frame(graph, frame, runner.weather, camera)
                if runner.fog is not None:
                    rendered = apply_fog(rendered, runner.fog)
                img_path = out / f"frame_{i:04d}.png"
                sio.save_image(img_path, rendered.rgb)
                written.append(img_path)
                if save_depth:
                    depth_path = out / f"frame_{i:04d}.f32"
                    sio.save_depth(depth_path, rendered.depth)
                    written.append(depth_path)
        click.echo(f"rendered {len(entries)} frames to {out}")
    except Exception as exc:
        for p in written:
            p.unlink(missing_ok=True)
        click.echo(f"error: {exc}", err=True)
        sys.exit(RUNTIME_ERROR)


def _rescale_camera(camera, width, height):
    from .rasterizer import Camera
    new_w = width or camera.width
    new_h = height or camera.height
    sx, sy = new_w / camera.width, new_h / camera.height
    return Camera(fx=camera.fx * sx, fy=camera.fy * sy, cx=camera.cx * sx, cy=camera.cy * sy,
                  rotation=camera.rotation, translation=camera.translation,
                  width=new_w, height=new_h, near=camera.near, far=camera.far)


@main.command("train")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scene-init", "init_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="YAML with TrainingConfig field overrides.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--log", "log_path", default=None, type=click.Path(dir_okay=False),
              help="Metrics log path (default: <out>.log).")
@click.option("--holdout-frames", default="", help="Comma-separated frame indices to exclude.")
@click.option("--threads", type=int, default=None)
@click.option("--deterministic", is_flag=True)
def cmd_train(manifest_path, init_path, config_path, out_path, log_path, holdout_frames,
              threads, deterministic):
    """Optimize a scene against a supervision manifest."""
    _setup_threads(threads, deterministic)
    try:
        graph = sio.load_scene(init_path)
        frames = sio.load_supervision(manifest_path)
        sio.validate_supervision(frames, graph)
        overrides = {}
        if config_path:
            overrides = yaml.safe_load(Path(config_path).read_text()) or {}
        config = TrainingConfig(**overrides)
        if holdout_frames:
            skip = {int(x) for x in holdout_frames.split(",")}
            frames = [f for f in frames if f.frame not in skip]
    except TypeError as exc:
        click.echo(f"error: bad config: {exc}", err=True)
        sys.exit(INPUT_ERROR)
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(INPUT_ERROR)

    try:
        log_file = log_path or (out_path + ".log")
        train(graph, frames, config, log_path=log_file)
        sio.save_scene(graph, out_path)
        click.echo(f"trained {config.iterations} iterations; scene -> {out_path}, log -> {log_file}")
    except Exception as exc:
        Path(out_path).unlink(missing_ok=True)
        click.echo(f"error: {exc}", err=True)
        sys.exit(RUNTIME_ERROR)


@main.command("eval")
@click.option("--renders", "renders_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--targets", "targets_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--report", "report_path", default=None, type=click.Path(dir_okay=False))
def cmd_eval(renders_dir, targets_dir, report_path):
    """Per-frame and mean PSNR/SSIM between two image directories."""
    renders = sorted(Path(renders_dir).glob("*.png"))
    targets = sorted(Path(targets_dir).glob("*.png"))
    if len(renders) != len(targets):
        click.echo(f"error: {len(renders)} renders vs {len(targets)} targets", err=True)
        sys.exit(INPUT_ERROR)
    if not renders:
        click.echo("error: no .png files found", err=True)
        sys.exit(INPUT_ERROR)

    lines = []
    psnrs, ssims = [], []
    for r_path, t_path in zip(renders, targets):
        a = sio.load_image(r_path)
        b = sio.load_image(t_path)
        p = psnr(a, b)
        s = float(ssim(a, b))
        psnrs.append(p)
        ssims.append(s)
        lines.append(f"{r_path.name} vs {t_path.name}: psnr={'inf' if p == float('inf') else f'{p:.4f}'} ssim={s:.6f}")
    finite = [p for p in psnrs if p != float("inf")]
    mean_psnr = "inf" if not finite else f"{sum(finite) / len(finite):.4f}"
    lines.append(f"mean: psnr={mean_psnr if finite else 'inf'} ssim={sum(ssims) / len(ssims):.6f}")
    report = "\n".join(lines)
    click.echo(report)
    if report_path:
        Path(report_path).write_text(report + "\n")


@main.command("make-synthetic")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--gaussians", type=int, default=500)
@click.option("--frames", type=int, default=10)
@click.option("--weathers", default="rainy,snowy", help="Comma-separated edited weather labels.")
@click.option("--seed", type=int, default=0)
@click.option("--width", type=int, default=64)
@click.option("--height", type=int, default=64)
def cmd_make_synthetic(out_dir, gaussians, frames, weathers, seed, width, height):
    """Generate a synthetic scene + multi-weather supervision dataset."""
    try:
        ds = make_synthetic(out_dir, n_gaussians=gaussians, frames=frames,
                            weathers=tuple(w.strip() for w in weathers.split(",") if w.strip()),
                            seed=seed, width=width, height=height)
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(INPUT_ERROR)
    click.echo(f"dataset at {ds.root}: scene={ds.scene_path.name} init={ds.init_path.name} "
               f"manifest={ds.manifest_path.name} weathers={','.join(ds.weathers)}")


@main.command("serve")
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--timeline", "timeline_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--port", type=int, default=8733)
@click.option("--host", default="127.0.0.1")
@click.option("--fps", type=float, default=10.0)
@click.option("--width", type=int, default=256)
@click.option("--height", type=int, default=256)
@click.option("--threads", type=int, default=None)
@click.option("--deterministic", is_flag=True)
def cmd_serve(scene_path, timeline_path, port, host, fps, width, height, threads, deterministic):
    """Run the live render service (HTTP + frame stream)."""
    _setup_threads(threads, deterministic)
    from .service import run_service
    try:
        run_service(scene_path, timeline_path, host=host, port=port, fps=fps,
                    width=width, height=height)
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(RUNTIME_ERROR)


if __name__ == "__main__":
    main()
