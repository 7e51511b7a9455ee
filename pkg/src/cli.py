"""
Command-Line Interface
reconstruct, render, finetune, eval, stats and synth subcommands
"""

import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
from pydantic import ValidationError

from src import __version__
from src.config import PipelineConfig, load_config
from src.errors import ConfigError, DataError, SplatFuseError, ViewMismatchError
from src.finetune import render_anchor_depths, run_finetune, select_training_frames, write_loss_trace
from src.geometry import CameraFrame
from src.metrics import depth_metrics, psnr, ssim
from src.pipeline import ReconstructionEngine
from src.renderer import render
from src.scene_io import (
    export_ply,
    frame_lookup,
    import_ply,
    load_scene,
    read_depth,
    read_image,
    read_manifest,
    write_depth,
    write_image,
    write_scene,
)
from src.synthetic import SyntheticScene, Trajectory, generate_synthetic, plant_floaters
from src.utils import ensure_directory, load_json, save_json, setup_logging

logger = logging.getLogger(__name__)


def _config_from_args(args: argparse.Namespace) -> PipelineConfig:
    """File + environment + --set, then the dedicated flags of the subcommand"""
    config = load_config(getattr(args, "config", None), getattr(args, "set", None))
    flags = {
        "lifting.use_gt_depth": True if getattr(args, "use_gt_depth", False) else None,
        "lifting.stride": getattr(args, "stride", None),
        "runtime.threads": getattr(args, "threads", None),
        "runtime.seed": getattr(args, "seed", None),
        "runtime.log_level": getattr(args, "log_level", None),
        "finetune.iters": getattr(args, "iters", None),
        "finetune.lambda_depth": getattr(args, "lambda_depth", None),
        "finetune.lambda_ssim": getattr(args, "lambda_ssim", None),
        "finetune.use_ssim_loss": True if getattr(args, "use_ssim_loss", False) else None,
    }
    overrides = {key: value for key, value in flags.items() if value is not None}
    return config.with_overrides(overrides) if overrides else config


def _apply_depth_hints(config: PipelineConfig, manifest_path: str) -> PipelineConfig:
    """Use the manifest's near/far hints unless the matching range was configured explicitly"""
    manifest = read_manifest(manifest_path)
    defaults = PipelineConfig().matching
    overrides = {}
    if manifest.near and config.matching.d_near == defaults.d_near:
        overrides["matching.d_near"] = manifest.near
    if manifest.far and config.matching.d_far == defaults.d_far:
        overrides["matching.d_far"] = manifest.far
    return config.with_overrides(overrides) if overrides else config


def _select_views(frames: List[CameraFrame], views: Optional[List[str]]) -> List[CameraFrame]:
    selected, unknown = frame_lookup(frames, views)
    if unknown:
        valid = ", ".join(f"{f.index} ({f.name})" for f in frames)
        raise ViewMismatchError(f"unknown view(s) {unknown}; valid views: {valid}")
    return selected


def _depth_suffix(config: PipelineConfig) -> str:
    return f".{config.runtime.depth_format}"


def cmd_reconstruct(args: argparse.Namespace, config: PipelineConfig) -> int:
    """Manifest -> scene.ply, predicted depths, stats.json and timings.json"""
    config = _apply_depth_hints(config, args.manifest)
    frames = load_scene(args.manifest)
    output = ensure_directory(args.output)

    result = ReconstructionEngine(config).reconstruct(frames)
    export_ply(result.primitives, str(output / "scene.ply"))

    names = {f.index: f.name for f in frames}
    for view_id, depth in result.predicted_depths().items():
        write_depth(str(output / "depths" / f"{names[view_id]}{_depth_suffix(config)}"), depth)

    stats = result.stats()
    stats["config"] = config.model_dump()
    save_json(stats, str(output / "stats.json"))
    save_json(result.timings, str(output / "timings.json"))

    logger.info("=" * 60)
    logger.info("Reconstruction Summary")
    logger.info("=" * 60)
    logger.info(f"Input views: {len(result.local_triplets)}")
    logger.info(f"Lifted triplets: {stats['total_lifted']}")
    logger.info(f"Gaussians: {stats['num_gaussians']} (ratio {stats['reduction_ratio']:.3f})")
    logger.info(f"✓ Wrote {output / 'scene.ply'}")
    logger.info("=" * 60)
    return 0


def cmd_render(args: argparse.Namespace, config: PipelineConfig) -> int:
    """PLY + manifest views -> colour PNG and depth per view, with PSNR against the input image"""
    scene = import_ply(args.ply)
    frames = _select_views(load_scene(args.manifest), args.views)
    output = ensure_directory(args.output)
    if scene.size == 0:
        logger.warning(f"{args.ply} holds no Gaussians; rendering black frames")

    report = []
    for frame in frames:
        rendered = render(scene, frame.camera, config.renderer.tile_size, config.renderer.near_plane)
        write_image(str(output / f"{frame.name}.png"), rendered.color)
        write_depth(str(output / f"{frame.name}_depth{_depth_suffix(config)}"), rendered.depth)
        score = psnr(rendered.color, frame.image)
        report.append({"view": frame.index, "name": frame.name, "split": frame.split, "psnr": score})
        logger.info(f"View {frame.name}: PSNR {score:.2f} dB")

    save_json({"views": report}, str(output / "render.json"))
    return 0


def cmd_finetune(args: argparse.Namespace, config: PipelineConfig) -> int:
    """PLY + manifest -> refined PLY and loss trace CSV"""
    scene = import_ply(args.ply)
    frames = select_training_frames(load_scene(args.manifest), config.finetune.training_views)
    output = ensure_directory(args.output)

    anchors = render_anchor_depths(scene, frames, config.renderer)
    checkpoints = str(output / "checkpoints") if config.finetune.checkpoint_every else None
    result = run_finetune(scene, frames, anchors, config.finetune, config.renderer,
                          seed=config.runtime.seed, checkpoint_dir=checkpoints)

    export_ply(result.scene, str(output / "refined.ply"))
    write_loss_trace(result, str(output / "loss_trace.csv"), config.finetune)
    logger.info(f"✓ PSNR {result.initial_psnr:.2f} dB -> {result.final_psnr:.2f} dB "
                f"({result.final_psnr - result.initial_psnr:+.2f} dB)")
    return 0


def evaluate_predictions(pred_dir: str, frames: List[CameraFrame], depth_format: str = "pfm") -> Dict:
    """
    Compare rendered views in pred_dir against ground-truth frames

    Expects <name>.png and optionally <name>_depth.<fmt> per frame (the layout `render` writes).

    Returns:
        {"views": [...], "aggregate": {...}, "splits": {split: {...}}}
    """
    root = Path(pred_dir)
    missing = [f.name for f in frames if not (root / f"{f.name}.png").exists()]
    if missing:
        raise ViewMismatchError(f"predictions missing for view(s) {missing} in {pred_dir}")

    rows = []
    for frame in frames:
        image = read_image(root / f"{frame.name}.png", frame.index)
        if image.shape != frame.image.shape:
            raise ViewMismatchError(f"prediction {image.shape} does not match {frame.image.shape}", frame.index)
        row = {
            "view": frame.index,
            "name": frame.name,
            "split": frame.split,
            "psnr": psnr(image, frame.image),
            "ssim": ssim(image, frame.image),
        }
        depth_path = root / f"{frame.name}_depth.{depth_format}"
        if frame.depth is not None and depth_path.exists():
            unit = "mm" if depth_format == "png" else "m"
            predicted = read_depth(depth_path, unit, frame.index)
            try:
                row.update(depth_metrics(predicted, frame.depth))
            except ValueError as e:
                logger.warning(f"View {frame.name}: {e}")
        rows.append(row)

    table = pd.DataFrame(rows)
    metric_columns = [c for c in table.columns if c not in ("view", "name", "split")]
    result = {
        "views": rows,
        "aggregate": table[metric_columns].mean(numeric_only=True).to_dict(),
        "splits": {
            split: group[metric_columns].mean(numeric_only=True).to_dict()
            for split, group in table.groupby("split")
        },
    }
    return result


def cmd_eval(args: argparse.Namespace, config: PipelineConfig) -> int:
    """Rendered predictions + manifest -> metrics.json"""
    frames = _select_views(load_scene(args.manifest), args.views)
    metrics = evaluate_predictions(args.pred, frames, config.runtime.depth_format)
    output = Path(args.output) if args.output else Path(args.pred) / "metrics.json"
    ensure_directory(str(output.parent))
    save_json(metrics, str(output))

    for split, values in metrics["splits"].items():
        logger.info(f"{split}: " + ", ".join(f"{k}={v:.4f}" for k, v in values.items()))
    logger.info(f"✓ Wrote {output}")
    return 0


def cmd_stats(args: argparse.Namespace, config: PipelineConfig) -> int:
    """Summarize a stats.json from reconstruct, or a PLY scene"""
    path = Path(args.input)
    if not path.exists():
        raise DataError(f"missing file '{path}'")

    if path.suffix.lower() == ".ply":
        scene = import_ply(str(path))
        summary = {
            "num_gaussians": scene.size,
            "mean_opacity": float(scene.opacities.mean()) if scene.size else 0.0,
            "low_opacity_fraction": float((scene.opacities < 0.01).mean()) if scene.size else 0.0,
            "mean_scale": float(scene.scales.mean()) if scene.size else 0.0,
        }
        print(pd.Series(summary).to_string())
        return 0

    stats = load_json(str(path))
    print(pd.DataFrame(stats.get("views", [])).to_string(index=False))
    print()
    summary_keys = ["total_lifted", "num_gaussians", "reduction_ratio", "floater_indications",
                    "opacity_reductions", "removed"]
    print(pd.Series({k: stats[k] for k in summary_keys if k in stats}).to_string())
    timings_path = path.with_name("timings.json")
    if timings_path.exists():
        print()
        print(pd.Series(load_json(str(timings_path)), name="seconds").to_string())
    return 0


def cmd_synth(args: argparse.Namespace, config: PipelineConfig) -> int:
    """Write a seeded synthetic room as manifest + images + depths"""
    trajectory = Trajectory(kind=args.trajectory, num_views=args.views)
    desc = SyntheticScene(
        trajectory=trajectory,
        width=args.width,
        height=args.height,
        seed=config.runtime.seed,
        extrapolation_ratio=args.extrapolation_ratio,
        interp_every=args.interp_every,
    )
    if args.floater_view:
        visible = args.floater_view if args.floater_only_there else None
        desc = plant_floaters(desc, args.floater_view, offset=args.floater_offset, visible_views=visible)

    result = generate_synthetic(desc)
    manifest = write_scene(result.frames, args.output, config.runtime.depth_format, near=0.1, far=8.0)
    if result.floaters:
        save_json({"floaters": result.floaters}, str(Path(args.output) / "floaters.json"))
    logger.info(f"✓ Wrote {manifest}")
    return 0


COMMANDS = {
    "reconstruct": cmd_reconstruct,
    "render": cmd_render,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "stats": cmd_stats,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or YAML config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one config value (repeatable)")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--threads", type=int, help="Worker threads for per-view work")
    common.add_argument("--seed", type=int, help="Random seed")

    parser = argparse.ArgumentParser(prog="splatfuse", description="Feed-forward Gaussian scene reconstruction")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", parents=[common], help="Reconstruct a scene from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--use-gt-depth", action="store_true", help="Lift from the manifest depths")
    p.add_argument("--stride", type=int, help="Lift stride (1, 2 or 4)")

    p = sub.add_parser("render", parents=[common], help="Render a PLY scene at manifest views")
    p.add_argument("--ply", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--views", nargs="*", help="View indices or names (default: all)")

    p = sub.add_parser("finetune", parents=[common], help="Depth-regularized fine-tuning")
    p.add_argument("--ply", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--lambda-depth", type=float)
    p.add_argument("--lambda-ssim", type=float)
    p.add_argument("--use-ssim-loss", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="Score rendered views against ground truth")
    p.add_argument("--pred", required=True, help="Directory written by `render`")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", help="metrics JSON path (default: <pred>/metrics.json)")
    p.add_argument("--views", nargs="*")

    p = sub.add_parser("stats", parents=[common], help="Summarize stats.json or a PLY")
    p.add_argument("input")

    p = sub.add_parser("synth", parents=[common], help="Write a synthetic room scene")
    p.add_argument("--output", required=True)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--trajectory", choices=["orbit", "linear"], default="orbit")
    p.add_argument("--width", type=int, default=80)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--floater-view", type=int, action="append", default=[],
                   help="Plant a floater on this view's optical axis (repeatable)")
    p.add_argument("--floater-offset", type=float, default=0.5)
    p.add_argument("--floater-only-there", action="store_true",
                   help="Floater visible only in the views it was planted for")
    p.add_argument("--extrapolation-ratio", type=float, default=0.0)
    p.add_argument("--interp-every", type=int, default=0)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Entry point

    Returns:
        0 on success, 2 config error, 3 data error, 4 divergence
    """
    args = build_parser().parse_args(argv)
    try:
        config = _config_from_args(args)
    except ConfigError as e:
        setup_logging("INFO")
        logger.error(f"❌ config: {e}")
        return e.exit_code

    setup_logging(config.runtime.log_level)
    try:
        return COMMANDS[args.command](args, config)
    except ValidationError as e:
        logger.error(f"❌ config: {e}")
        return ConfigError.exit_code
    except SplatFuseError as e:
        logger.error(f"❌ {args.command}: {e}")
        return e.exit_code
