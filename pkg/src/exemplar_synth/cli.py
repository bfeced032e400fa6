"""Command-line interface for exemplar-synth."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, NoReturn, Optional

from . import __version__
from .config import (
    EXEMPLAR_SOURCES,
    MODES,
    SIMILARITIES,
    VARIANTS,
    AdapterConfig,
    ModelConfig,
    RunConfig,
    SampleConfig,
    SceneConfig,
    TrainConfig,
    as_manifest,
    load_config_file,
    resolve,
    write_manifest,
)
from .diffusion import ExemplarPipeline
from .errors import ConfigError, SynthError
from .evalviz import evaluate, render_attention_pair, render_cat_cost, summarize, write_report_csv
from .netpbm import read_pgm, read_ppm, write_ppm
from .numeric import load_params
from .retrieval import build_pool, load_pool, retrieve
from .scenes import SceneImage, SegMap, full_view, generate_dataset, read_dataset, write_dataset
from .segcost import GuidanceSpec, load_guidance
from .training import train_stage1, train_stage2

logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_RUNTIME = 2

# config key -> (type, help); each key becomes a --flag of the same name
KEY_FLAGS: dict[str, tuple[Any, str]] = {
    "resolution": (int, "working image resolution"),
    "anchor_resolution": (int, "rendered anchor resolution"),
    "num_classes": (int, "number of classes, background included"),
    "min_instances": (int, "fewest objects per scene"),
    "max_instances": (int, "most objects per scene"),
    "hue_jitter": (float, "per-instance hue jitter"),
    "sv_jitter": (float, "per-instance saturation/value jitter"),
    "texture_amplitude": (float, "value texture amplitude"),
    "duplicate_prob": (float, "probability that a class appears twice"),
    "crop_min": (float, "smallest crop side, as a fraction of the anchor"),
    "crop_max": (float, "largest crop side, as a fraction of the anchor"),
    "flip_prob": (float, "horizontal flip probability"),
    "num_scenes": (int, "number of scenes to render"),
    "image_size": (int, "denoiser input size"),
    "heads": (int, "attention heads"),
    "time_dim": (int, "timestep embedding width"),
    "t_train": (int, "training schedule length"),
    "t_sample": (int, "DDIM sampling steps"),
    "augmented_layers": (str, "layers with augmented attention, e.g. 0-9"),
    "adapted_layers": (str, "layers carrying the adapter, e.g. 1-9"),
    "c_mid": (int, "adapter hidden channels"),
    "lr": (float, "learning rate"),
    "weight_decay": (float, "decoupled weight decay"),
    "batch_size": (int, "samples per step (0 = stage default)"),
    "steps": (int, "optimizer steps"),
    "dataset_dir": (str, "dataset directory"),
    "checkpoint_dir": (str, "checkpoint and log directory"),
    "stage1_checkpoint": (str, "stage-1 checkpoint to start from"),
    "eval_every": (int, "checkpoint and summary cadence in steps"),
    "variant": (str, f"stage-2 variant: {', '.join(VARIANTS)}"),
    "mode": (str, f"attention mode: {', '.join(MODES)}"),
    "exemplar_latent": (str, "exemplar latents: invert or noise"),
    "exemplar_source": (str, f"evaluation exemplars: {', '.join(EXEMPLAR_SOURCES)}"),
    "similarity": (str, f"retrieval similarity: {', '.join(SIMILARITIES)}"),
}


class SynthArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"error: {message}\n")


def _add_keys(parser: argparse.ArgumentParser, *keys: str) -> None:
    for key in keys:
        kind, text = KEY_FLAGS[key]
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind, default=None, help=text)


def _scale_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--s",
        "--scale",
        dest="scale",
        type=float,
        default=None,
        help="matching cost guidance scale (default: 7.5; -1 = baseline, 0 = adapter only)",
    )


def _exemplar_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--exemplar-image", help="exemplar image (PPM)")
    parser.add_argument("--exemplar-seg", help="exemplar label map (PGM)")
    parser.add_argument("--pool", help="exemplar pool directory")
    parser.add_argument("--exemplar", type=int, help="pool entry id to use as exemplar")
    parser.add_argument(
        "--auto-retrieve", action="store_true", help="pick the exemplar from --pool automatically"
    )
    parser.add_argument("--guide", help="one-to-one guidance file")


def _layers(args: argparse.Namespace) -> list[dict[str, Any]]:
    """Config layers in precedence order: config file, then flags."""
    file_values = load_config_file(args.config) if args.config else {}
    return [file_values, vars(args)]


def _resolve(section: type, args: argparse.Namespace, **fixed: Any) -> Any:
    return resolve(section, *_layers(args), fixed)


def _progress(args: argparse.Namespace) -> bool:
    return bool(_resolve(RunConfig, args).progress)


def _read_seg(path: str, num_classes: int) -> SegMap:
    labels, _ = read_pgm(path)
    return SegMap(labels, num_classes)


def _load_pipeline(args: argparse.Namespace) -> ExemplarPipeline:
    return ExemplarPipeline.from_checkpoints(args.checkpoint, args.adapter)


def _default_mode(pipeline: ExemplarPipeline, args: argparse.Namespace) -> dict[str, Any]:
    """Fall back to the baseline mode when no adapter was given and no mode was asked for."""
    file_values = load_config_file(args.config) if args.config else {}
    if args.mode is None and "mode" not in file_values and pipeline.adapter is None:
        return {"mode": "baseline"}
    return {}


def _exemplar(
    args: argparse.Namespace, pipeline: ExemplarPipeline, seg_y: SegMap, cfg: SampleConfig
) -> tuple[Optional[tuple[SceneImage, SegMap]], Optional[int]]:
    size = pipeline.net.cfg.image_size
    num_classes = pipeline.net.cfg.num_classes
    if args.exemplar_image or args.exemplar_seg:
        if not (args.exemplar_image and args.exemplar_seg):
            raise ConfigError("--exemplar-image and --exemplar-seg go together")
        image = SceneImage(read_ppm(args.exemplar_image))
        seg = _read_seg(args.exemplar_seg, num_classes)
        if seg.shape != (size, size):
            image, seg = full_view(image, seg, size)
        return (image, seg), None
    if args.pool:
        pool = load_pool(args.pool)
        if args.exemplar is not None:
            entry = pool.get(args.exemplar)
        elif args.auto_retrieve:
            entry = retrieve(seg_y, pool, pipeline, cfg.seed, k=1, similarity=cfg.similarity)[0].entry
        else:
            raise ConfigError("--pool needs --exemplar ID or --auto-retrieve")
        if entry.seg.shape != (size, size):
            return full_view(entry.image, entry.seg, size), entry.entry_id
        return (entry.image, entry.seg), entry.entry_id
    if args.auto_retrieve or args.exemplar is not None:
        raise ConfigError("--auto-retrieve and --exemplar need --pool")
    return None, None


def _guidance(args: argparse.Namespace) -> Optional[GuidanceSpec]:
    return load_guidance(args.guide) if args.guide else None


def _sampling_extra(args: argparse.Namespace, pipeline: ExemplarPipeline) -> dict[str, Any]:
    """Manifest entries that pin down the sampler and the stage-2 weights."""
    return {
        "t_sample": pipeline.net.cfg.t_sample,
        "checkpoint": args.checkpoint,
        "adapter": args.adapter,
        "adapter_digest": load_params(args.adapter).digest() if args.adapter else None,
        "guide": args.guide,
    }


def cmd_gen_data(args: argparse.Namespace) -> None:
    """Handle the gen-data subcommand."""
    cfg = _resolve(SceneConfig, args)
    samples = generate_dataset(cfg, progress=_progress(args))
    out = Path(args.out)
    if args.as_pool:
        build_pool(out, samples, cfg.resolution)
    else:
        write_dataset(out, samples)
    write_manifest(out / "run.cfg", as_manifest(cfg, extra={"command": "gen-data"}))
    print(f"Wrote {len(samples)} scenes to {out}")


def cmd_train_stage1(args: argparse.Namespace) -> None:
    """Handle the train-stage1 subcommand."""
    cfg = _resolve(TrainConfig, args, stage=1)
    model_cfg = _resolve(ModelConfig, args)
    scene_cfg = _resolve(SceneConfig, args)
    write_manifest(
        Path(cfg.checkpoint_dir) / "stage1_run.cfg",
        as_manifest(scene_cfg, model_cfg, cfg, extra={"command": "train-stage1"}),
    )
    result = train_stage1(cfg, model_cfg, scene_cfg, progress=_progress(args))
    print(f"Checkpoint: {result.checkpoint}")
    print(f"Log: {result.log_path}")
    if result.losses:
        print(f"Final loss: {result.losses[-1]:.6f}")


def cmd_train_stage2(args: argparse.Namespace) -> None:
    """Handle the train-stage2 subcommand."""
    cfg = _resolve(TrainConfig, args, stage=2)
    adapter_cfg = _resolve(AdapterConfig, args)
    scene_cfg = _resolve(SceneConfig, args)
    write_manifest(
        Path(cfg.checkpoint_dir) / "stage2_run.cfg",
        as_manifest(scene_cfg, adapter_cfg, cfg, extra={"command": "train-stage2"}),
    )
    result = train_stage2(cfg, adapter_cfg, scene_cfg, progress=_progress(args))
    print(f"Checkpoint: {result.checkpoint}")
    print(f"Log: {result.log_path}")
    print(f"Frozen weights digest: {result.frozen_digest_after}")
    if result.losses:
        print(f"Final loss: {result.losses[-1]:.6f}")


def cmd_retrieve(args: argparse.Namespace) -> None:
    """Handle the retrieve subcommand."""
    cfg = _resolve(SampleConfig, args)
    pipeline = ExemplarPipeline.from_checkpoints(args.checkpoint)
    seg_y = _read_seg(args.seg, pipeline.net.cfg.num_classes)
    hits = retrieve(seg_y, load_pool(args.pool), pipeline, cfg.seed, k=args.k, similarity=cfg.similarity)
    out = Path(args.out)
    lines = [f"{rank}\t{hit.entry_id}\t{hit.score:.6f}\n" for rank, hit in enumerate(hits, 1)]
    out.write_text("rank\tid\tscore\n" + "".join(lines), encoding="utf-8")
    write_manifest(
        out.with_suffix(".cfg"),
        as_manifest(cfg, extra={"command": "retrieve", "seg": args.seg, "pool": args.pool, "k": args.k}),
    )
    for line in lines:
        print(line, end="")


def cmd_generate(args: argparse.Namespace) -> None:
    """Handle the generate subcommand."""
    pipeline = _load_pipeline(args)
    cfg = _resolve(SampleConfig, args, **_default_mode(pipeline, args))
    seg_y = _read_seg(args.seg, pipeline.net.cfg.num_classes)
    exemplar, exemplar_id = _exemplar(args, pipeline, seg_y, cfg)
    image = pipeline.generate(
        seg_y,
        exemplar,
        mode=cfg.mode if exemplar is not None else "none",
        guidance=_guidance(args),
        scale=cfg.scale,
        seed=cfg.seed,
        exemplar_latent=cfg.exemplar_latent,
    )
    out = Path(args.out)
    write_ppm(out, image.rgb)
    write_manifest(
        out.with_suffix(".cfg"),
        as_manifest(
            cfg,
            extra={
                "command": "generate",
                "seg": args.seg,
                "exemplar_id": exemplar_id,
                **_sampling_extra(args, pipeline),
            },
        ),
    )
    print(f"Wrote {out}")


def cmd_evaluate(args: argparse.Namespace) -> None:
    """Handle the evaluate subcommand."""
    pipeline = _load_pipeline(args)
    cfg = _resolve(SampleConfig, args, **_default_mode(pipeline, args))
    scene_cfg = _resolve(SceneConfig, args)
    samples = read_dataset(args.dataset)
    if args.limit is not None:
        samples = samples[: args.limit]
    pool = load_pool(args.pool) if args.pool else None
    records = evaluate(
        pipeline, samples, cfg, scene_cfg, pool=pool, guidance=_guidance(args), progress=_progress(args)
    )
    report, classes = write_report_csv(args.report, records)
    write_manifest(
        report.with_suffix(".cfg"),
        as_manifest(
            cfg,
            scene_cfg,
            extra={"command": "evaluate", "dataset": args.dataset, **_sampling_extra(args, pipeline)},
        ),
    )
    summary = summarize(records)
    appearance = "n/a" if summary.appearance_dist is None else f"{summary.appearance_dist:.4f}"
    print(f"Samples: {len(records)}")
    print(f"structure_iou: {summary.structure_iou:.4f}")
    print(f"appearance_dist: {appearance}")
    print(f"Report: {report} ({classes})")


def cmd_attn_vis(args: argparse.Namespace) -> None:
    """Handle the attn-vis subcommand."""
    pipeline = _load_pipeline(args)
    cfg = _resolve(SampleConfig, args, **_default_mode(pipeline, args))
    if cfg.mode == "none":
        raise ConfigError("attention maps need an exemplar mode")
    size = pipeline.net.cfg.image_size
    seg_y = _read_seg(args.seg, pipeline.net.cfg.num_classes)
    exemplar, _ = _exemplar(args, pipeline, seg_y, cfg)
    if exemplar is None:
        raise ConfigError("attn-vis needs an exemplar")
    steps = len(pipeline.schedule.pairs())
    if not 0 <= args.step < steps:
        raise ConfigError(f"--step must lie in [0, {steps - 1}]")
    guidance = _guidance(args)
    captured: dict[str, Any] = {}

    def record(step: int, state: Any, refined: Any) -> None:
        if step == args.step and state.cfg.layer == args.layer:
            captured["state"], captured["refined"] = state, refined

    pipeline.sample(
        seg_y,
        exemplar,
        mode=cfg.mode,
        guidance=guidance,
        scale=cfg.scale,
        seed=cfg.seed,
        exemplar_latent=cfg.exemplar_latent,
        recorder=record,
    )
    if "state" not in captured:
        raise ConfigError(f"layer {args.layer} is not an augmented attention site")
    query = (args.query[0], args.query[1])
    out_dir = Path(args.out_dir)
    paths = render_attention_pair(captured["state"], captured["refined"], query, out_dir, size)
    attn = pipeline.attn_size
    cost = pipeline.costs.get(seg_y, exemplar[1], (attn, attn), guidance)
    paths.append(render_cat_cost(cost, query, out_dir / f"catcost_L{args.layer}.ppm", size))
    write_manifest(
        out_dir / "attn_vis.cfg",
        as_manifest(
            cfg,
            extra={"command": "attn-vis", "layer": args.layer, "step": args.step, "query": f"{query[0]},{query[1]}"},
        ),
    )
    for path in paths:
        print(f"Wrote {path}")


def create_parser() -> argparse.ArgumentParser:
    """Create the main argument parser with subcommands."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (flags override it)")
    common.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    common.add_argument("--no-progress", dest="progress", action="store_false", default=None, help="hide progress bars")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")

    parser = SynthArgumentParser(
        prog="exemplar-synth",
        description="Exemplar-based semantic image synthesis on synthetic scenes",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  exemplar-synth gen-data --out data --num-scenes 200
  exemplar-synth train-stage1 --dataset-dir data --checkpoint-dir ckpt --steps 500
  exemplar-synth train-stage2 --dataset-dir data --stage1-checkpoint ckpt/stage1.amad
  exemplar-synth generate --checkpoint ckpt/stage1.amad --adapter ckpt/stage2.amad \\
      --seg t.pgm --pool pool --auto-retrieve --s 7.5 --seed 1 --out out.ppm
        """.strip(),
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", help="Available commands", metavar="COMMAND")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return subparsers.add_parser(name, help=help_text, description=help_text, parents=[common])

    gen = add("gen-data", "Render a synthetic scene dataset or exemplar pool")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument(
        "--as-pool", action="store_true", help="write an exemplar pool (resized views and gray caches)"
    )
    _add_keys(
        gen,
        "num_scenes",
        "num_classes",
        "anchor_resolution",
        "resolution",
        "min_instances",
        "max_instances",
        "hue_jitter",
        "sv_jitter",
        "texture_amplitude",
        "duplicate_prob",
    )
    gen.set_defaults(func=cmd_gen_data)

    stage1 = add("train-stage1", "Train the segmentation-conditioned denoiser")
    _add_keys(
        stage1,
        "dataset_dir",
        "checkpoint_dir",
        "steps",
        "lr",
        "weight_decay",
        "batch_size",
        "eval_every",
        "resolution",
        "image_size",
        "num_classes",
        "heads",
        "time_dim",
        "t_train",
        "t_sample",
        "augmented_layers",
        "adapted_layers",
        "crop_min",
        "crop_max",
        "flip_prob",
    )
    stage1.set_defaults(func=cmd_train_stage1)

    stage2 = add("train-stage2", "Train the matching adapter on a frozen denoiser")
    _add_keys(
        stage2,
        "dataset_dir",
        "checkpoint_dir",
        "stage1_checkpoint",
        "variant",
        "steps",
        "lr",
        "weight_decay",
        "batch_size",
        "eval_every",
        "resolution",
        "c_mid",
        "crop_min",
        "crop_max",
        "flip_prob",
    )
    stage2.add_argument(
        "--head-mixing",
        dest="head_mixing",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="let the adapter mix heads (default: on)",
    )
    stage2.set_defaults(func=cmd_train_stage2)

    ret = add("retrieve", "Rank pool exemplars for a target label map")
    ret.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
    ret.add_argument("--seg", required=True, help="target label map (PGM)")
    ret.add_argument("--pool", required=True, help="exemplar pool directory")
    ret.add_argument("--k", type=int, default=1, help="number of exemplars to list (default: 1)")
    ret.add_argument("--out", default="retrieval.tsv", help="ranking file (default: retrieval.tsv)")
    _add_keys(ret, "similarity")
    ret.set_defaults(func=cmd_retrieve)

    for name, help_text, handler in (
        ("generate", "Synthesize an image from a label map and an exemplar", cmd_generate),
        ("attn-vis", "Render attention and categorical cost maps for one query", cmd_attn_vis),
    ):
        sub = add(name, help_text)
        sub.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
        sub.add_argument("--adapter", help="stage-2 checkpoint")
        sub.add_argument("--seg", required=True, help="target label map (PGM)")
        _exemplar_flags(sub)
        _scale_flag(sub)
        _add_keys(sub, "mode", "exemplar_latent", "similarity")
        sub.set_defaults(func=handler)
    generate_parser = subparsers.choices["generate"]
    generate_parser.add_argument("--out", required=True, help="output image (PPM)")
    vis_parser = subparsers.choices["attn-vis"]
    vis_parser.add_argument("--layer", type=int, default=5, help="attention site (default: 5)")
    vis_parser.add_argument("--step", type=int, default=0, help="sampling step index (default: 0)")
    vis_parser.add_argument(
        "--query", type=int, nargs=2, metavar=("I", "J"), default=(0, 0), help="query point on the attention grid"
    )
    vis_parser.add_argument("--out-dir", required=True, help="output directory")

    ev = add("evaluate", "Score generated images against their exemplars")
    ev.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
    ev.add_argument("--adapter", help="stage-2 checkpoint")
    ev.add_argument("--dataset", required=True, help="dataset directory")
    ev.add_argument("--pool", help="pool for retrieved exemplars (default: the dataset itself)")
    ev.add_argument("--guide", help="one-to-one guidance file")
    ev.add_argument("--limit", type=int, help="evaluate only the first N samples")
    ev.add_argument("--report", default="report.csv", help="report path (default: report.csv)")
    _scale_flag(ev)
    _add_keys(ev, "mode", "exemplar_latent", "exemplar_source", "similarity", "crop_min", "crop_max", "flip_prob")
    ev.set_defaults(func=cmd_evaluate)

    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("exemplar_synth").setLevel(level)


def run(argv: Optional[list[str]] = None) -> int:
    """Parse ``argv`` and execute one command; returns the exit status."""
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    # If no subcommand is provided, show help
    if not hasattr(args, "func"):
        parser.print_help()
        return EXIT_USAGE

    _configure_logging(args)
    try:
        args.func(args)
    except (SynthError, OSError) as e:
        logger.debug("%s failed", args.command, exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


def main() -> None:
    """Main CLI entry point."""
    sys.exit(run())


if __name__ == "__main__":  # pragma: no cover
    main()
