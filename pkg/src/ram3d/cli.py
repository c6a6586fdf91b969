"""``ram3d`` command line: synth, erase, replace, monolithic, export, render, eval.

Exit codes: 0 success, 2 config/data/io errors, 3 numerical failures,
1 anything unexpected. Errors print as ``error[category]: message``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np
import yaml

from . import plotting
from .config import RunConfig, dump_config, load_config, parse_config
from .errors import CountMismatch, ConfigError, IoError, Ram3dError
from .field import FieldConfig
from .guidance import ExternalProvider, OracleProvider
from .metrics import (EvalReport, ProjectionEmbeddingProvider, ReportRow, TableEmbeddingProvider,
                      direction_consistency, direction_similarity)
from .objectives import Objectives, OracleDepthEstimator, RandomConvExtractor
from .renderer import render_bubble
from .scene_io import (Camera, export_edited_dataset, list_frame_files, load_dataset, read_array, read_frames,
                       write_dataset, write_image)
from .trainer import (load_checkpoint, run_erase, run_monolithic, run_replace, save_checkpoint, write_loss_csv)

log = logging.getLogger("ram3d")

EXIT_OK, EXIT_UNEXPECTED, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


# -- wiring --------------------------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if getattr(args, "steps", None) is not None:
        try:
            cfg.train = dataclasses.replace(cfg.train, steps=args.steps)
        except ValueError as exc:
            raise ConfigError(f"--steps: {exc}") from exc
    if getattr(args, "provider", None):
        if args.provider not in ("oracle", "external"):
            raise ConfigError(f"--provider: unknown guidance provider {args.provider!r}")
        cfg.guidance.provider = args.provider
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "prompt", None) is not None:
        cfg.prompt = args.prompt
    return cfg


def _dataset(cfg: RunConfig):
    if not cfg.dataset.root:
        raise ConfigError("dataset.root is not set")
    return load_dataset(cfg.path(cfg.dataset.root), cfg.dataset_config)


def _provider(cfg: RunConfig, stage: str, n_views: int):
    g = cfg.guidance
    if g.provider == "external":
        if not g.command:
            raise ConfigError("guidance.command is required for the external provider")
        return ExternalProvider.spawn(g.command)
    o = g.oracle
    if stage == "erase":
        if not o.erase_targets:
            raise ConfigError("guidance.oracle.erase_targets is required for the oracle provider")
        targets, alphas = read_frames(cfg.path(o.erase_targets)), None
    else:
        if not o.replace_targets:
            raise ConfigError("guidance.oracle.replace_targets is required for the oracle provider")
        targets = read_frames(cfg.path(o.replace_targets))
        alphas = read_frames(cfg.path(o.replace_alphas)) if o.replace_alphas else None
    if len(targets) not in (1, n_views) or (alphas is not None and len(alphas) != len(targets)):
        raise CountMismatch(f"oracle targets: {len(targets)} files for {n_views} views")
    return OracleProvider(targets, o.factor, alphas)


def _objectives(cfg: RunConfig, n_views: int) -> Objectives:
    depth = None
    if cfg.depth.estimator == "oracle":
        maps = read_frames(cfg.path(cfg.depth.oracle_dir))
        if len(maps) not in (1, n_views):
            raise CountMismatch(f"depth maps: {len(maps)} files for {n_views} views")
        depth = OracleDepthEstimator(maps)
    extractor = RandomConvExtractor(cfg.perceptual.seed, tuple(cfg.perceptual.channels))
    return Objectives(extractor, depth, cfg.train.loss_weights)


def _close(provider):
    close = getattr(provider, "close", None)
    if close:
        close()


def _progress(total):
    every = max(1, total // 20)

    def cb(step, parts):
        if (step + 1) % every == 0 or step + 1 == total:
            log.info("step %d/%d  total %.6g  hifa %.4g  recon %.4g", step + 1, total, parts["total"],
                     parts["hifa"], parts["recon"])
    return cb


def _write_stage(out_dir, result, cfg: RunConfig, dataset, title):
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    save_checkpoint(os.path.join(out_dir, "field.ckpt"), result.params, result.adam, result.step, cfg.train,
                    cfg.field, result.stage)
    for f, img in zip(dataset.frames, result.frames):
        write_image(os.path.join(out_dir, "frames", f.name), img)
    np.save(os.path.join(out_dir, "frames.npy"), np.stack(result.frames))
    write_loss_csv(os.path.join(out_dir, "loss.csv"), result.history)
    if result.history:
        plotting.plot_losses(result.history, os.path.join(out_dir, "loss.png"), title)
    plotting.save_contact_sheet(result.frames, os.path.join(out_dir, "frames.png"))
    with open(os.path.join(out_dir, "config.yaml"), "w") as fh:
        fh.write(dump_config(cfg))


# -- commands ------------------------------------------------------------------------

def cmd_erase(args):
    cfg = _config(args)
    ds = _dataset(cfg)
    provider = _provider(cfg, "erase", len(ds))
    try:
        result = run_erase(ds, provider, _objectives(cfg, len(ds)), cfg.train, cfg.field,
                           callback=_progress(cfg.train.steps))
    finally:
        _close(provider)
    out = os.path.join(cfg.path(cfg.out), "erase")
    _write_stage(out, result, cfg, ds, "erase")
    print(f"erase: {result.step} steps, outputs in {out}")
    return EXIT_OK


def _backgrounds(cfg: RunConfig, args, ds):
    if args.background:
        files = list_frame_files(args.background)
        frames = [read_array(f) for f in files]
        mode = "addition" if _same_as_inputs(frames, ds) else "background"
    else:
        path = os.path.join(cfg.path(cfg.out), "erase", "frames.npy")
        if not os.path.exists(path):
            raise CountMismatch("no backgrounds: run `ram3d erase` first or pass --background DIR")
        frames, mode = list(np.load(path)), "erase"
    if len(frames) != len(ds):
        raise CountMismatch(f"{len(frames)} background frames for {len(ds)} views")
    for f, b in zip(ds.frames, frames):
        if b.shape != f.image.shape:
            raise CountMismatch(f"{f.name}: background shape {b.shape} vs image {f.image.shape}")
    return frames, mode


def _same_as_inputs(frames, ds):
    return len(frames) == len(ds) and all(
        b.shape == f.image.shape and np.array_equal(b, f.image) for b, f in zip(frames, ds.frames))


def cmd_replace(args):
    cfg = _config(args)
    ds = _dataset(cfg)
    bg, mode = _backgrounds(cfg, args, ds)
    provider = _provider(cfg, "replace", len(ds))
    try:
        result = run_replace(ds, bg, provider, cfg.prompt, cfg.train, cfg.field, callback=_progress(cfg.train.steps))
    finally:
        _close(provider)
    out = os.path.join(cfg.path(cfg.out), "replace")
    _write_stage(out, result, cfg, ds, f"replace: {cfg.prompt}")
    os.makedirs(os.path.join(out, "alpha"), exist_ok=True)
    for f, a in zip(ds.frames, result.alphas):
        write_image(os.path.join(out, "alpha", f.name), np.repeat(a[..., None], 3, axis=-1))
    np.save(os.path.join(out, "alphas.npy"), np.stack(result.alphas))
    export_edited_dataset(ds, result.frames, os.path.join(out, "dataset"))
    print(f"replace ({mode} mode): {result.step} steps, outputs in {out}")
    return EXIT_OK


def cmd_monolithic(args):
    cfg = _config(args)
    ds = _dataset(cfg)
    provider = _provider(cfg, "replace", len(ds))
    try:
        result = run_monolithic(ds, provider, cfg.prompt, cfg.train, cfg.field, _objectives(cfg, len(ds)),
                                callback=_progress(cfg.train.steps))
    finally:
        _close(provider)
    out = os.path.join(cfg.path(cfg.out), "monolithic")
    _write_stage(out, result, cfg, ds, f"monolithic: {cfg.prompt}")
    export_edited_dataset(ds, result.frames, os.path.join(out, "dataset"))
    print(f"monolithic: {result.step} steps, outputs in {out}")
    return EXIT_OK


def cmd_export(args):
    """Re-export an edited dataset from a stage's saved frames."""
    cfg = _config(args)
    ds = _dataset(cfg)
    stage_dir = os.path.join(cfg.path(cfg.out), args.stage)
    path = os.path.join(stage_dir, "frames.npy")
    if not os.path.exists(path):
        raise CountMismatch(f"no frames for stage {args.stage!r} at {path}")
    frames = list(np.load(path))
    dest = args.dest or os.path.join(stage_dir, "dataset")
    export_edited_dataset(ds, frames, dest)
    print(f"exported {len(frames)} frames to {dest}")
    return EXIT_OK


def cmd_render(args):
    params, _, step, header = load_checkpoint(args.checkpoint)
    fc = FieldConfig.from_dict(header["field_config"])
    tc = header.get("train_config", {})
    cfg = _config(args)
    ds = _dataset(cfg)
    if args.camera_json:
        try:
            with open(args.camera_json) as fh:
                cam = Camera.from_record(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise IoError(f"cannot read camera {args.camera_json}: {exc}") from exc
        frame = dataclasses.replace(ds.frames[0], camera=cam, image=np.zeros((cam.height, cam.width, 3)))
        if frame.regions.mask.shape != (cam.height, cam.width) and args.region != "full":
            raise ConfigError("a custom camera must match the dataset frame size unless --region full")
        ds = dataclasses.replace(ds, frames=(frame,))
        index = 0
    else:
        index = args.camera
        if not 0 <= index < len(ds):
            raise CountMismatch(f"camera index {index} out of range [0, {len(ds)})")
    settings = cfg.train.render_settings(jitter=False)
    settings.n_coarse = tc.get("coarse_samples", settings.n_coarse)
    settings.n_fine = tc.get("fine_samples", settings.n_fine)
    mode = "replace" if header.get("stage") == "replace" else "erase"
    b = render_bubble(index, ds, args.region, params, fc, settings, mode=mode)
    prefix = args.output
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    write_image(prefix + "_rgb.png", b.image)
    write_image(prefix + "_alpha.png", np.repeat(b.alpha[..., None], 3, axis=-1))
    cam = ds.frames[index].camera
    dnorm = np.where(b.region, (b.depth - cam.near) / (cam.far - cam.near), 0.0)
    write_image(prefix + "_depth.png", np.repeat(np.clip(dnorm, 0, 1)[..., None], 3, axis=-1))
    np.save(prefix + "_depth.npy", b.depth)
    print(f"rendered view {index} from step-{step} checkpoint to {prefix}_{{rgb,alpha,depth}}.png")
    return EXIT_OK


def _eval_frames(path):
    sub = os.path.join(path, "images")
    return read_frames(sub if os.path.isdir(sub) else path)


def _embedding_provider(args):
    if args.provider in (None, "projection"):
        return ProjectionEmbeddingProvider(dim=args.dim, seed=args.embed_seed)
    if args.provider == "table":
        if not args.table:
            raise ConfigError("--provider table needs --table FILE.npz")
        try:
            data = np.load(args.table)
        except (OSError, ValueError) as exc:
            raise IoError(f"cannot read {args.table}: {exc}") from exc
        images = {k[len("image/"):]: data[k] for k in data.files if k.startswith("image/")}
        texts = {k[len("text/"):]: data[k] for k in data.files if k.startswith("text/")}
        return TableEmbeddingProvider(images, texts)
    raise ConfigError(f"--provider: unknown embedding provider {args.provider!r}")


def cmd_eval(args):
    orig = _eval_frames(args.orig)
    edit = _eval_frames(args.edit)
    if len(orig) != len(edit):
        raise CountMismatch(f"{len(orig)} original frames vs {len(edit)} edited frames")
    if len(orig) < 2:
        raise CountMismatch("direction consistency needs at least two frames")
    if len(args.src) != len(args.tgt):
        raise ConfigError("give one --tgt per --src")
    provider = _embedding_provider(args)
    scene = args.scene or os.path.basename(os.path.normpath(args.orig))
    cons = direction_consistency(orig, edit, provider)
    report = EvalReport(meta={"provider": provider.name, "scene": scene})
    for src, tgt in zip(args.src, args.tgt):
        report.rows.append(ReportRow(scene, src, tgt, direction_similarity(orig, edit, src, tgt, provider), cons))
    out = args.output
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    report.write_csv(out)
    plotting.plot_report(report, os.path.splitext(out)[0] + ".png")
    print(report.table())
    return EXIT_OK


def cmd_synth(args):
    """Write the analytic test scene with its oracle targets and a desk-scale config."""
    from .synthetic import DESK_ORACLE_FACTOR, SyntheticScene, desk_field_config, desk_train_config

    tc = desk_train_config()
    scene = SyntheticScene(size=args.size, n_views=args.views, focal=float(args.size))
    gt = scene.build()
    out = args.dest
    write_dataset(os.path.join(out, "dataset"), gt["images"], gt["masks"], gt["cameras"])
    for sub, key in (("erase_targets", "backgrounds"), ("replace_rgb", "new_rgb"),
                     ("replace_alpha", "new_alpha"), ("depth", "bg_depths"), ("replace_composite", "targets")):
        os.makedirs(os.path.join(out, "oracle", sub), exist_ok=True)
        for k, arr in enumerate(gt[key]):
            np.save(os.path.join(out, "oracle", sub, f"{k:03d}.npy"), arr)
    doc = {
        "out": "runs",
        "prompt": "a green ball",
        "dataset": {"root": "dataset", "dilation_radius": 2, "halo_width": 3, "guidance_resolution": args.size,
                    "scene_name": "synthetic"},
        "field": desk_field_config().to_dict(),
        "train": {"steps": tc.steps, "coarse_samples": tc.coarse_samples, "fine_samples": tc.fine_samples,
                  "seed": args.seed},
        "guidance": {"provider": "oracle", "oracle": {"factor": DESK_ORACLE_FACTOR,
                                                       "erase_targets": "oracle/erase_targets",
                                                       "replace_targets": "oracle/replace_rgb",
                                                       "replace_alphas": "oracle/replace_alpha"}},
        # exact depth maps are written; set estimator: oracle to add the depth term
        "depth": {"estimator": "none", "oracle_dir": "oracle/depth"},
    }
    parse_config(doc)  # the written file must load
    with open(os.path.join(out, "config.yaml"), "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
    print(f"synthetic scene with {args.views} views written to {out}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="ram3d", description="Erase and replace objects in multiview scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def stage(name, fn, help_, prompt=False, background=False):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--steps", type=int)
        s.add_argument("--provider", help="guidance provider: oracle or external")
        s.add_argument("--out", help="output root (overrides the config)")
        if prompt:
            s.add_argument("--prompt", help="edit prompt (overrides the config)")
        if background:
            s.add_argument("--background", help="dir of per-view background frames; the input images "
                                                "give object addition")
        s.set_defaults(func=fn)
        return s

    stage("erase", cmd_erase, "inpaint the masked region")
    stage("replace", cmd_replace, "generate a new object inside the mask", prompt=True, background=True)
    stage("monolithic", cmd_monolithic, "single-stage edit over mask and halo", prompt=True)

    s = stage("export", cmd_export, "re-export an edited dataset from saved frames")
    s.add_argument("--stage", default="replace", choices=["erase", "replace", "monolithic"])
    s.add_argument("--dest", help="destination directory")

    s = stage("render", cmd_render, "render rgb/alpha/depth previews from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--camera", type=int, default=0, help="dataset view index")
    s.add_argument("--camera-json", help="camera record file instead of a dataset view")
    s.add_argument("--region", default="full", choices=["full", "bubble", "mask"])
    s.add_argument("--output", required=True, help="path prefix for the PNGs")

    s = sub.add_parser("eval", help="embedding-direction metrics for an edit")
    s.add_argument("--orig", required=True)
    s.add_argument("--edit", required=True)
    s.add_argument("--src", action="append", required=True, help="source prompt (repeatable)")
    s.add_argument("--tgt", action="append", required=True, help="target prompt (repeatable, paired with --src)")
    s.add_argument("--provider", default="projection", help="projection or table")
    s.add_argument("--table", help="npz of image/<sha256> and text/<prompt> embeddings")
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--embed-seed", type=int, default=0)
    s.add_argument("--seed", type=int, help="accepted for uniformity; eval is deterministic")
    s.add_argument("--scene")
    s.add_argument("--output", "--out", dest="output", default="report.csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write the analytic test scene and a desk-scale config")
    s.add_argument("dest")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--views", type=int, default=6)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def _thread_limit():
    value = os.environ.get("RAM3D_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"RAM3D_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("RAM3D_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except Ram3dError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if exc.category == "numeric" else EXIT_DATA
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
