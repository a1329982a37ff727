"""Command-line entry point.

Subcommands: generate-data, train, adapt, infer, evaluate, bench-attention,
export, calibrate. Every run resolves its configuration from an optional JSON
config file plus flag overrides, logs the resolved values, and embeds them in
output manifests so artifacts are traceable to their exact settings.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, store
from . import adapt as adapt_mod
from . import evalrun, synthvfx
from .codec import PixelVideo, encode
from .denoiser import Denoiser, bench_attention, load_checkpoint
from .diffusion import NoiseSchedule, TrainConfig, sample, train
from .synthvfx import (ALL_FAMILIES, IN_DOMAIN_FAMILIES, Dataset, build_dataset,
                       load_dataset)
from .vfxcons import calibrate

VIDEO_FORMAT = "icfx.video"


class CliError(ValueError):
    """Bad flags or config; exits nonzero with the message."""


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliError(f"config file {p} must hold a JSON object")
    return cfg


def _resolve(args: argparse.Namespace, config: dict, keys: list[str]) -> dict:
    """Flag value if given, else config-file value, else argparse default."""
    resolved = {}
    for key in keys:
        flag_val = getattr(args, key)
        if key in config and flag_val == args._defaults_.get(key):
            resolved[key] = config[key]
        else:
            resolved[key] = flag_val
    return resolved


def _print_resolved(name: str, resolved: dict) -> None:
    print(f"[icfx {__version__}] {name} config: "
          + json.dumps(resolved, sort_keys=True, default=str))


def _save_video_bundle(path: Path, video: np.ndarray, config: dict) -> None:
    store.save_bundle(path, {"format": VIDEO_FORMAT, "version": 1, "config": config},
                      {"video": np.ascontiguousarray(video, dtype="<f4")})


def _load_video_bundle(path: Path) -> tuple[np.ndarray, dict]:
    manifest, arrays = store.load_bundle(path)
    if manifest.get("format") != VIDEO_FORMAT:
        raise CliError(f"{path} is not a video bundle")
    return arrays["video"], manifest


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate_data(args, config) -> int:
    resolved = _resolve(args, config, ["pairs", "families", "seed", "out"])
    families = tuple(resolved["families"].split(",")) if isinstance(resolved["families"], str) \
        else tuple(resolved["families"])
    _print_resolved("generate-data", {**resolved, "families": families})
    manifest = build_dataset(resolved["pairs"], families, resolved["out"], resolved["seed"])
    print(f"wrote {len(manifest['samples'])} samples ({manifest['pair_count']} pairs) "
          f"to {resolved['out']}")
    return 0


def cmd_train(args, config) -> int:
    keys = ["data", "out", "steps", "batch", "lr", "seed", "mask_mode", "attention_path"]
    resolved = _resolve(args, config, keys)
    _print_resolved("train", resolved)
    cfg = TrainConfig(
        data_path=resolved["data"], out_dir=resolved["out"], steps=resolved["steps"],
        batch=resolved["batch"], lr=resolved["lr"], seed=resolved["seed"],
        mask_mode=resolved["mask_mode"], attention_path=resolved["attention_path"],
    )
    result = train(cfg)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log:   {result.loss_log_path}")
    if result.losses:
        print(f"final loss: {result.losses[-1]:.4f} ({cfg.steps} steps, "
              f"{result.seconds:.1f}s)")
    return 0


def _require_checkpoint(path: str) -> tuple[Denoiser, dict]:
    if not path:
        raise CliError("--checkpoint is required")
    if not Path(path).exists():
        raise CliError(f"checkpoint not found: {path}")
    cfg, params, extra = load_checkpoint(path)
    return Denoiser(cfg, params), extra


def cmd_adapt(args, config) -> int:
    keys = ["checkpoint", "data", "example", "steps", "concept_len", "lr", "seed", "out"]
    resolved = _resolve(args, config, keys)
    _print_resolved("adapt", resolved)
    den, _ = _require_checkpoint(resolved["checkpoint"])
    data = load_dataset(resolved["data"])
    example = data.sample(resolved["example"])
    cfg = adapt_mod.AdaptConfig(steps=resolved["steps"], concept_len=resolved["concept_len"],
                                lr=resolved["lr"], seed=resolved["seed"])
    result = adapt_mod.adapt(den, example.prompt.array(), example.video, cfg)
    adapt_mod.save_concept(resolved["out"], result.concept, example.effect.family, cfg,
                           extra={"checkpoint": str(resolved["checkpoint"]),
                                  "example_index": resolved["example"],
                                  "final_loss": result.losses[-1] if result.losses else None})
    print(f"concept tokens: {resolved['out']} "
          f"(effect {example.effect.family}, {cfg.steps} steps)")
    return 0


def cmd_infer(args, config) -> int:
    keys = ["checkpoint", "data", "reference", "target", "steps", "seed",
            "mask_mode", "with_ce", "out"]
    resolved = _resolve(args, config, keys)
    _print_resolved("infer", resolved)
    den, _ = _require_checkpoint(resolved["checkpoint"])
    data = load_dataset(resolved["data"])
    ref = data.sample(resolved["reference"])
    tgt = data.sample(resolved["target"])
    concept = None
    if resolved["with_ce"]:
        concept, _ = adapt_mod.load_concept(resolved["with_ce"])
    schedule = NoiseSchedule.linear()
    ref_latent = encode(ref.video).tokens().astype(np.float32)[None]
    grid = encode(ref.video).grid
    video = sample(den, schedule, ref.prompt.array()[None], ref_latent,
                   tgt.prompt.array()[None], tgt.video.data[0][None], grid,
                   steps=resolved["steps"], seed=resolved["seed"],
                   mask_mode=resolved["mask_mode"], concept=concept)[0]
    out = Path(resolved["out"])
    _save_video_bundle(out, video, resolved)
    print(f"video bundle: {out} (shape {video.shape})")
    return 0


def cmd_evaluate(args, config) -> int:
    keys = ["checkpoint", "families", "scenes", "seed", "judge", "mask_mode",
            "sample_steps", "with_ce", "out"]
    resolved = _resolve(args, config, keys)
    families = tuple(resolved["families"].split(",")) if isinstance(resolved["families"], str) \
        else tuple(resolved["families"])
    _print_resolved("evaluate", {**resolved, "families": families})
    if resolved["judge"] != "oracle":
        raise CliError("only the oracle judge is wired into `evaluate`; "
                       "the remote judge is exercised via the API with a configured endpoint")
    den, _ = _require_checkpoint(resolved["checkpoint"])
    concept = None
    if resolved["with_ce"]:
        concept, _ = adapt_mod.load_concept(resolved["with_ce"])
    schedule = NoiseSchedule.linear()
    report = evalrun.evaluate_model(
        den, schedule, families, resolved["scenes"], resolved["seed"],
        sample_steps=resolved["sample_steps"], mask_mode=resolved["mask_mode"],
        concept=concept)
    summary, cases_csv = evalrun.write_report(report, resolved["out"])
    print(f"EOS {report.eos_rate:.2f}  EFS {report.efs_rate:.2f}  "
          f"CLS {report.cls_rate:.2f}  VFX-Cons {report.vfx_cons:.2f}")
    print(f"frechet_proxy {report.frechet_proxy:.2f}  dynamics_proxy {report.dynamics_proxy:.4f}")
    print(f"summary: {summary}\ncases:   {cases_csv}")
    return 0


def cmd_bench_attention(args, config) -> int:
    keys = ["video", "prompt", "concept", "repeats", "out"]
    resolved = _resolve(args, config, keys)
    _print_resolved("bench-attention", resolved)
    report = bench_attention({
        "prompt": resolved["prompt"], "video": resolved["video"],
        "concept": resolved["concept"],
    }, repeats=resolved["repeats"])
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if resolved["out"]:
        store.atomic_write_bytes(resolved["out"], text.encode())
        print(f"report: {resolved['out']}")
    return 0


def cmd_export(args, config) -> int:
    keys = ["video", "format", "out"]
    resolved = _resolve(args, config, keys)
    _print_resolved("export", resolved)
    from PIL import Image

    out_dir = Path(resolved["out"])
    if not resolved["video"]:
        print("no videos given; nothing to export")
        return 0
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for bundle_path in resolved["video"]:
        video, _ = _load_video_bundle(Path(bundle_path))
        frames8 = np.clip((video + 1.0) * 0.5 * 255.0, 0, 255).round().astype(np.uint8)
        stem = Path(bundle_path).stem
        if resolved["format"] == "png-strip":
            for i in range(frames8.shape[0]):
                p = out_dir / f"{stem}_frame{i:02d}.png"
                Image.fromarray(frames8[i]).save(p)
                written.append(p)
        elif resolved["format"] == "gif":
            p = out_dir / f"{stem}.gif"
            imgs = [Image.fromarray(frames8[i]).convert("P", palette=Image.ADAPTIVE)
                    for i in range(frames8.shape[0])]
            imgs[0].save(p, save_all=True, append_images=imgs[1:], duration=250, loop=0)
            written.append(p)
        else:
            raise CliError(f"unknown export format {resolved['format']!r}")
    for p in written:
        print(f"wrote {p}")
    return 0


def cmd_calibrate(args, config) -> int:
    keys = ["pairs", "seed", "out"]
    resolved = _resolve(args, config, keys)
    _print_resolved("calibrate", resolved)
    report = calibrate(resolved["pairs"], resolved["seed"])
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if resolved["out"]:
        store.atomic_write_bytes(resolved["out"], text.encode())
    rates = report["ground_truth_pass_rate"]
    ok = all(v == 1.0 for v in rates.values()) and report["shuffled_family_efs_fail_rate"] >= 0.95
    if not ok:
        print("calibration targets missed", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icfx",
        description="Reference-based in-context video effect generation, desk scale.")
    parser.add_argument("--config", help="JSON config file; flags override its keys")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render a paired-effect dataset")
    p.add_argument("--pairs", type=int, default=512)
    p.add_argument("--families", default=",".join(IN_DOMAIN_FAMILIES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="phase-1 training (attention layers only)")
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="runs/train")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-mode", dest="mask_mode", choices=["canonical", "none"],
                   default="canonical")
    p.add_argument("--attention-path", dest="attention_path",
                   choices=["decomposed", "full"], default="decomposed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="phase-2: train concept tokens on one example")
    p.add_argument("--checkpoint", default="")
    p.add_argument("--data", default="data")
    p.add_argument("--example", type=int, default=0, help="dataset sample index")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--concept-len", dest="concept_len", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="concept.icfx")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("infer", help="generate one video from a reference pair + first frame")
    p.add_argument("--checkpoint", default="")
    p.add_argument("--data", default="data")
    p.add_argument("--reference", type=int, default=0, help="dataset sample index of the reference")
    p.add_argument("--target", type=int, default=1, help="dataset sample index giving prompt + first frame")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-mode", dest="mask_mode", choices=["canonical", "none"],
                   default="canonical")
    p.add_argument("--with-ce", dest="with_ce", default="", help="concept-token bundle path")
    p.add_argument("--out", default="video.icfx")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score generations on fresh scenes")
    p.add_argument("--checkpoint", default="")
    p.add_argument("--families", default=",".join(IN_DOMAIN_FAMILIES))
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--judge", choices=["oracle"], default="oracle")
    p.add_argument("--mask-mode", dest="mask_mode", choices=["canonical", "none"],
                   default="canonical")
    p.add_argument("--sample-steps", dest="sample_steps", type=int, default=50)
    p.add_argument("--with-ce", dest="with_ce", default="")
    p.add_argument("--out", default="runs/eval")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench-attention", help="full vs decomposed attention cost")
    p.add_argument("--video", type=int, default=256, help="video tokens per segment")
    p.add_argument("--prompt", type=int, default=8)
    p.add_argument("--concept", type=int, default=0)
    p.add_argument("--repeats", type=int, default=9)
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_bench_attention)

    p = sub.add_parser("export", help="export video bundles to PNG frames or GIF")
    p.add_argument("--video", nargs="*", default=[], help="video bundle paths")
    p.add_argument("--format", choices=["png-strip", "gif"], default="png-strip")
    p.add_argument("--out", default="exports")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("calibrate", help="verify the oracle judge on ground truth")
    p.add_argument("--pairs", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_calibrate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        # Remember argparse defaults so config-file values can fill non-overridden keys.
        args._defaults_ = {
            k: parser._subparsers._group_actions[0].choices[args.command].get_default(k)
            for k in vars(args) if k not in ("config", "command", "func", "_defaults_")
        }
        config = _load_config(args.config)
        return args.func(args, config)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (synthvfx.SpecError, synthvfx.DatasetError, store.BundleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
