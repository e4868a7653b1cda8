"""Command-line front end: train, render, eval, synth, stats.

Configuration comes from documented defaults, an optional key=value config
file, then command-line flag overrides, in that order. Unknown config keys
are errors. Every subcommand is deterministic under a fixed seed and
config; the --threads knob (env fallback CONTRAGS_THREADS) never changes
results.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .metrics import psnr, ssim
from .model import init_one_to_one, model_bytes, validate_state
from .modelio import (load_manifest, load_model, load_scene, quantize8,
                      save_model, save_png, synth_scene, write_metrics_csv,
                      write_scene)
from .render import rasterize_forward
from .sampler import SamplerConfig, train_step


class CliError(Exception):
    """Invalid invocation: bad config key, missing input, malformed scene."""


@dataclasses.dataclass
class RunConfig:
    """Everything a training run needs; all fields have usable defaults."""

    scene: str = ""
    out: str = "out"
    iters: int = 2000
    seed: int = 0
    threads: int = 1
    eval_every: int = 200
    checkpoint_every: int = 1000
    init_gaussians: int = 64
    init_extent: float = 1.0
    sh_degree: int = 0
    p_update: float = 0.98
    p_split: float = 0.01
    p_merge: float = 0.01
    eps_split_sh: float = 0.1
    eps_merge_sh: float = 0.05
    eps_split_sr: float = 0.1
    eps_merge_sr: float = 0.05
    lambda_sh: float = 2.3
    lambda_sr: float = 3.0
    lambda_ssim: float = 0.2
    step_pos: float = 0.5
    step_opacity: float = 10.0
    step_sh: float = 20.0
    step_sr: float = 2.0
    noise_pos: float = 1.0
    noise_opacity: float = 0.0
    noise_sh: float = 0.0
    noise_sr: float = 0.0
    split_fraction: float = 0.01
    densify_every: int = 100
    densify_growth: float = 0.05
    densify_jitter: float = 0.02
    gaussian_cap: int = 2_000_000
    normalization_correction: bool = False
    exact_ratio: bool = False

    def to_sampler(self) -> SamplerConfig:
        names = {f.name for f in dataclasses.fields(SamplerConfig)}
        kwargs = {f.name: getattr(self, f.name)
                  for f in dataclasses.fields(self) if f.name in names}
        cfg = SamplerConfig(**kwargs)
        cfg.validate()
        return cfg


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, raw: str):
    f = _FIELDS[name]
    if f.type in ("bool", bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CliError(f"config key {name}: expected a boolean, got {raw!r}")
    try:
        if f.type in ("int", int):
            return int(raw)
        if f.type in ("float", float):
            return float(raw)
    except ValueError:
        raise CliError(f"config key {name}: cannot parse {raw!r}")
    return raw


def load_config_file(path) -> dict:
    """key=value lines; '#' starts a comment; unknown keys are errors."""
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in _FIELDS:
                raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, raw.strip())
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config).items():
            setattr(cfg, key, value)
    for name in _FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    # Convenience: one flag sets the width for both codebooks.
    if getattr(args, "eps_split", None) is not None:
        cfg.eps_split_sh = cfg.eps_split_sr = args.eps_split
    if getattr(args, "eps_merge", None) is not None:
        cfg.eps_merge_sh = cfg.eps_merge_sr = args.eps_merge
    if cfg.threads is None or getattr(args, "threads", None) is None:
        env = os.environ.get("CONTRAGS_THREADS")
        if env is not None and getattr(args, "threads", None) is None:
            try:
                cfg.threads = int(env)
            except ValueError:
                raise CliError(f"CONTRAGS_THREADS must be an integer, got {env!r}")
    if cfg.threads < 1:
        raise CliError("threads must be >= 1")
    return cfg


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    for name, f in _FIELDS.items():
        flag = "--" + name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, type=str, choices=["true", "false"], default=None,
                           help=f"override {name} (default {f.default})")
        else:
            typ = int if f.type in ("int", int) else (float if f.type in ("float", float) else str)
            p.add_argument(flag, type=typ, default=None,
                           help=f"override {name} (default {f.default})")
    p.add_argument("--eps-split", type=float, default=None,
                   help="set the split width for both codebooks")
    p.add_argument("--eps-merge", type=float, default=None,
                   help="set the merge width for both codebooks")


def _coerce_bools(args: argparse.Namespace) -> None:
    for name, f in _FIELDS.items():
        if f.type in ("bool", bool):
            v = getattr(args, name, None)
            if isinstance(v, str):
                setattr(args, name, v == "true")


def cmd_train(args) -> int:
    _coerce_bools(args)
    cfg = resolve_config(args)
    if not cfg.scene:
        raise CliError("train requires --scene (a scene manifest)")
    _, views = load_scene(cfg.scene)
    os.makedirs(cfg.out, exist_ok=True)

    extent = cfg.init_extent
    box = ((-extent, -extent, -extent), (extent, extent, extent))
    state = init_one_to_one(cfg.init_gaussians, cfg.sh_degree, cfg.seed, box)
    sampler_cfg = cfg.to_sampler()
    rng = np.random.default_rng(cfg.seed)

    records = []
    for _ in range(cfg.iters):
        rec = train_step(state, views, sampler_cfg, rng)
        if cfg.eval_every > 0 and state.iteration % cfg.eval_every == 0:
            vals = [psnr(rasterize_forward(state, cam).image, gt) for cam, gt in views]
            rec.psnr = float(np.mean(vals))
        records.append(rec)
        if cfg.checkpoint_every > 0 and state.iteration % cfg.checkpoint_every == 0:
            save_model(state, os.path.join(cfg.out, f"model_{state.iteration:06d}.cgs"))

    validate_state(state)
    save_model(state, os.path.join(cfg.out, "model_final.cgs"))
    write_metrics_csv(records, os.path.join(cfg.out, "metrics.csv"))
    final_psnr = next((r.psnr for r in reversed(records) if np.isfinite(r.psnr)), float("nan"))
    print(f"trained {cfg.iters} iterations: N={state.num_gaussians} "
          f"|SH|={state.sh.live_count} |SR|={state.sr.live_count} "
          f"last eval psnr={final_psnr:.2f} dB")
    print(f"wrote {os.path.join(cfg.out, 'model_final.cgs')}")
    return 0


def cmd_render(args) -> int:
    if not os.path.exists(args.model):
        raise CliError(f"model not found: {args.model}")
    state = load_model(args.model)
    manifest = load_manifest(args.scene)
    os.makedirs(args.out, exist_ok=True)
    for view in manifest.views:
        img = rasterize_forward(state, view.camera).image
        out_path = os.path.join(args.out, os.path.basename(view.image_path))
        save_png(out_path, img)
        print(f"wrote {out_path}")
    return 0


def cmd_eval(args) -> int:
    if not os.path.exists(args.model):
        raise CliError(f"model not found: {args.model}")
    state = load_model(args.model)
    _, views = load_scene(args.scene)
    psnrs, ssims = [], []
    for k, (cam, gt) in enumerate(views):
        rendered = quantize8(rasterize_forward(state, cam).image)
        p = psnr(rendered, gt)
        s = ssim(rendered, gt)
        psnrs.append(p)
        ssims.append(s)
        print(f"view {k}: psnr={p:.3f} dB  ssim={s:.5f}")
    print(f"mean: psnr={np.mean(psnrs):.3f} dB  ssim={np.mean(ssims):.5f}")
    return 0


def cmd_synth(args) -> int:
    state, manifest, images = synth_scene(args.gaussians, args.views, args.size,
                                          args.sh_degree, args.shared_rows, args.seed)
    write_scene(args.out, state, manifest, images)
    print(f"wrote scene with {args.gaussians} Gaussians sharing {args.shared_rows} "
          f"rows per codebook, {args.views} views -> {args.out}")
    return 0


def cmd_stats(args) -> int:
    if not os.path.exists(args.model):
        raise CliError(f"model not found: {args.model}")
    state = load_model(args.model)
    compressed, dense, ratio = model_bytes(state)
    print(f"gaussians: {state.num_gaussians}")
    print(f"sh rows (live): {state.sh.live_count}  sr rows (live): {state.sr.live_count}")
    print(f"compressed bytes: {compressed}")
    print(f"dense-equivalent bytes: {dense}")
    print(f"compression ratio: {ratio:.4f}")
    for name, book in (("sh", state.sh), ("sr", state.sr)):
        counts = book.refcount[book.refcount > 0]
        hist = np.bincount(counts)
        print(f"{name} refcount histogram (refcount: rows):")
        for rc in np.flatnonzero(hist):
            print(f"  {rc}: {hist[rc]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contrags",
        description="Train and inspect codebook-compressed Gaussian-splat scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the sampling/training loop")
    _add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_render = sub.add_parser("render", help="render every manifest view to PNG")
    p_render.add_argument("--model", required=True)
    p_render.add_argument("--scene", required=True)
    p_render.add_argument("--out", required=True)
    p_render.add_argument("--threads", type=int, default=None)
    p_render.set_defaults(func=cmd_render)

    p_eval = sub.add_parser("eval", help="PSNR/SSIM of a model against a scene")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--scene", required=True)
    p_eval.add_argument("--threads", type=int, default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_synth = sub.add_parser("synth", help="generate a synthetic ground-truth scene")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--gaussians", type=int, default=64)
    p_synth.add_argument("--views", type=int, default=3)
    p_synth.add_argument("--size", type=int, default=64)
    p_synth.add_argument("--sh-degree", type=int, default=0)
    p_synth.add_argument("--shared-rows", type=int, default=16)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth)

    p_stats = sub.add_parser("stats", help="memory accounting and refcount histogram")
    p_stats.add_argument("--model", required=True)
    p_stats.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
