"""Stage orchestration: Erase, Replace and Monolithic optimisation loops.

All randomness is counter-based: every draw comes from a generator seeded by
``(seed, stream, step)``, so a run is a pure function of its config and a
checkpoint resumes bit-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ckpt
from .errors import ConfigMismatch, NumericalError, Ram3dError, VersionError
from .field import FieldConfig, FieldParams, init_params
from .guidance import DistillLossConfig, GuidanceProvider, NoiseSchedule, distill_loss, schedule_t
from .objectives import (DegenerateDepthWarning, LossWeights, Objectives, depth_loss, erase_total,
                         perceptual_loss, recon_loss, replace_total)
from .renderer import RenderSettings, render_backward, render_bubble
from .scene_io import SceneDataset, apply_crop, compute_crop, crop_adjoint, crop_mask

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "l_hifa", "l_recon", "l_vgg", "l_depth", "total")

# rng stream ids
_VIEW, _RENDER, _NOISE, _BACKGROUND = 0, 1, 2, 3


@dataclass
class TrainConfig:
    steps: int = 20000
    lr: float = 1e-3
    hash_lr_multiplier: float = 10.0
    lr_decay: float = 1.0  # lr multiplier reached at the last step (exponential); 1 = constant
    cfg_scale_erase: float = 7.5
    cfg_scale_replace: float = 30.0
    bg_swap_interval: int = 3  # 0 disables background augmentation
    coarse_samples: int = 128
    fine_samples: int = 128
    seed: int = 0
    lambda_recon: float = 3.0
    lambda_vgg: float = 0.03
    lambda_depth: float = 3.0
    lambda_rgb: float = 0.1
    t_min: float = 0.2
    t_max: float = 0.98
    w_of_t: str = "constant"
    distill_reduction: str = "mean"
    crop_mode: str = "center_height"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    chunk: int = 4096
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.bg_swap_interval < 0:
            raise ValueError("bg_swap_interval must be >= 0")
        if self.lr <= 0 or self.hash_lr_multiplier <= 0 or self.lr_decay <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def loss_weights(self):
        return LossWeights(self.lambda_recon, self.lambda_vgg, self.lambda_depth)

    @property
    def schedule(self):
        return NoiseSchedule(self.t_min, self.t_max, self.steps)

    def render_settings(self, jitter=True):
        return RenderSettings(self.coarse_samples, self.fine_samples, self.chunk, jitter)

    def distill_config(self, cfg_scale):
        return DistillLossConfig(self.lambda_rgb, cfg_scale, self.w_of_t, self.distill_reduction)

    def swap_background(self, step: int) -> bool:
        k = self.bg_swap_interval
        return k > 0 and step % k == 0

    def fingerprint(self, field_config: FieldConfig) -> str:
        d = asdict(self)
        d.pop("checkpoint_every")
        doc = json.dumps({"train": d, "field": field_config.to_dict()}, sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()


class AdamState:
    def __init__(self, params: FieldParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps


def adam_step(params: FieldParams, grads: FieldParams, state: AdamState, lr_per_group: dict, step_index=None):
    """Bias-corrected Adam, in place. ``lr_per_group`` maps "hash"/"mlp" to a learning rate."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name}", step=step_index)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.arrays[name]
        m = state.m.arrays[name]
        v = state.v.arrays[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        lr = lr_per_group[FieldParams.group(name)]
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def group_learning_rates(config: TrainConfig, step: int = 0) -> dict:
    lr = config.lr
    if config.lr_decay != 1.0:
        lr *= config.lr_decay ** (step / max(config.steps - 1, 1))
    return {"hash": lr * config.hash_lr_multiplier, "mlp": lr}


@dataclass
class StageOutput:
    params: FieldParams
    frames: list  # per-view edited images
    history: list  # [(step, {name: value})]
    adam: AdamState | None = None
    step: int = 0
    alphas: list = field(default_factory=list)  # per-view alpha maps (replace stage)
    stage: str = ""


def step_rng(seed: int, stream: int, step: int):
    return np.random.default_rng([seed, stream, step])


def save_checkpoint(path, params: FieldParams, adam: AdamState, step: int, config: TrainConfig,
                    field_config: FieldConfig, stage: str = ""):
    header = {
        "kind": "train",
        "stage": stage,
        "step": int(step),
        "adam_step": int(adam.step),
        "config_hash": config.fingerprint(field_config),
        "field_config": field_config.to_dict(),
        "train_config": asdict(config),
    }
    arrays = list(params.items())
    arrays += [(f"adam_m/{k}", v) for k, v in adam.m.items()]
    arrays += [(f"adam_v/{k}", v) for k, v in adam.v.items()]
    ckpt.write(path, header, arrays)


def load_checkpoint(path, config: TrainConfig | None = None, field_config: FieldConfig | None = None):
    """Returns ``(params, adam, step, header)``; checks the config fingerprint when configs are given."""
    header, arrays = ckpt.read(path)
    if header.get("kind") != "train":
        raise VersionError(f"{path}: not a training checkpoint")
    stored_field = FieldConfig.from_dict(header["field_config"])
    if config is not None:
        fc = field_config or stored_field
        if config.fingerprint(fc) != header["config_hash"]:
            raise ConfigMismatch(f"{path}: checkpoint was written with a different configuration")
    names = [n for n in arrays if "/" not in n]
    params = FieldParams({n: arrays[n] for n in names})
    tc = header.get("train_config", {})
    adam = AdamState(params, tc.get("beta1", 0.9), tc.get("beta2", 0.999), tc.get("adam_eps", 1e-8))
    adam.m = FieldParams({n: arrays[f"adam_m/{n}"].copy() for n in names})
    adam.v = FieldParams({n: arrays[f"adam_v/{n}"].copy() for n in names})
    adam.step = int(header["adam_step"])
    return params, adam, int(header["step"]), header


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for step, parts in history:
            w.writerow([step] + [repr(float(parts[k])) for k in ("hifa", "recon", "vgg", "depth", "total")])


def read_loss_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), {k: float(r["l_" + k] if k != "total" else r["total"])
                              for k in ("hifa", "recon", "vgg", "depth", "total")}) for r in rows]


class _Stage:
    """Shared loop: view sampling, optimiser, history, checkpoints."""

    name = ""

    def __init__(self, dataset: SceneDataset, provider: GuidanceProvider, config: TrainConfig,
                 field_config: FieldConfig, params=None, adam=None, start_step=0):
        self.dataset = dataset
        self.provider = provider
        self.config = config
        self.fc = field_config
        self.params = params if params is not None else init_params(field_config, config.seed)
        self.adam = adam or AdamState(self.params, config.beta1, config.beta2, config.adam_eps)
        self.start_step = start_step
        self.settings = config.render_settings()
        self.crops = [
            compute_crop(f.regions, f.camera.width, f.camera.height, config.crop_mode, dataset.guidance_resolution)
            for f in dataset.frames
        ]

    def pick_view(self, step):
        return int(step_rng(self.config.seed, _VIEW, step).integers(len(self.dataset)))

    def step(self, step):
        raise NotImplementedError

    def run(self, stop_at=None, checkpoint_dir=None, callback: Callable | None = None):
        history = []
        end = self.config.steps if stop_at is None else min(stop_at, self.config.steps)
        for step in range(self.start_step, end):
            try:
                parts, grads = self.step(step)
            except NumericalError as exc:
                if exc.step is None:
                    raise NumericalError(str(exc), step=step) from exc
                raise
            if not all(np.isfinite(v) for v in parts.values()):
                raise NumericalError(f"non-finite loss {parts}", step=step)
            adam_step(self.params, grads, self.adam, group_learning_rates(self.config, step), step_index=step)
            history.append((step, parts))
            if callback is not None:
                callback(step, parts)
            every = self.config.checkpoint_every
            if checkpoint_dir and every and (step + 1) % every == 0:
                save_checkpoint(os.path.join(checkpoint_dir, f"{self.name}_{step + 1:06d}.ckpt"),
                                self.params, self.adam, step + 1, self.config, self.fc, self.name)
        return history, end

    def crop_inputs(self, i, image):
        crop = self.crops[i]
        return apply_crop(image, crop), crop

    def distill(self, i, x_full, cond_full, prompt, cfg_scale, step):
        """Distillation on the denoiser crop of one view; cotangent returned in frame space."""
        frame = self.dataset.frames[i]
        x_c, crop = self.crop_inputs(i, x_full)
        cond_c = apply_crop(cond_full, crop)
        m_c = crop_mask(frame.regions.mask, crop)
        t = schedule_t(step, self.config.steps, self.config.schedule)
        loss, g_c, x_hat = distill_loss(x_c, self.provider, prompt, m_c, cond_c, t,
                                        self.config.distill_config(cfg_scale),
                                        step_rng(self.config.seed, _NOISE, step),
                                        view=i, crop=crop, return_estimate=True)
        return loss, crop_adjoint(g_c, crop, x_full.shape), x_hat

    def output(self, history, end, frames, alphas=()):
        return StageOutput(self.params, frames, history, self.adam, end, list(alphas), self.name)


class _EraseStage(_Stage):
    name = "erase"

    def __init__(self, dataset, provider, objectives: Objectives, config, field_config, prompt="",
                 region="bubble", cfg_scale=None, use_depth=True, **kw):
        super().__init__(dataset, provider, config, field_config, **kw)
        self.objectives = objectives
        self.prompt = prompt
        self.region = region
        self.cfg_scale = config.cfg_scale_erase if cfg_scale is None else cfg_scale
        self.weights = config.loss_weights
        self.use_depth = use_depth and objectives.depth_estimator is not None and self.weights.lambda_depth > 0

    def step(self, step):
        i = self.pick_view(step)
        frame = self.dataset.frames[i]
        bubble = render_bubble(i, self.dataset, self.region, self.params, self.fc, self.settings,
                               step_rng(self.config.seed, _RENDER, step), mode="erase", keep_cache=True)
        x_bg = bubble.image
        hifa, g_img, x_hat = self.distill(i, x_bg, frame.image, self.prompt, self.cfg_scale, step)
        w = self.weights
        recon = vgg = dep = 0.0
        halo = frame.regions.halo
        if w.lambda_recon > 0:
            recon, g = recon_loss(x_bg, frame.image, halo)
            g_img = g_img + w.lambda_recon * g
        if w.lambda_vgg > 0:
            vgg, g = perceptual_loss(x_bg, frame.image, halo, self.objectives.extractor)
            g_img = g_img + w.lambda_vgg * g
        g_depth = None
        if self.use_depth:
            dep, g_depth = self._depth(i, bubble, x_hat)
            g_depth = w.lambda_depth * g_depth
        grads = render_backward(bubble, self.params, self.fc, g_img, None, g_depth)
        parts = {"hifa": hifa, "recon": recon, "vgg": vgg, "depth": dep}
        parts["total"] = erase_total(parts, w)
        return parts, grads

    def _depth(self, i, bubble, x_hat):
        crop = self.crops[i]
        est = self.objectives.depth_estimator.estimate(x_hat, view=i, crop=crop)
        region_c = apply_crop(bubble.region.astype(np.float64), crop) > 1.0 - 1e-9
        if region_c.sum() < 2:
            return 0.0, np.zeros_like(bubble.depth)
        d_c = apply_crop(bubble.depth, crop)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateDepthWarning)
            loss, g_c = depth_loss(d_c, est, region_c)
        return loss, crop_adjoint(g_c, crop, bubble.depth.shape)

    def final_frames(self):
        settings = self.config.render_settings(jitter=False)
        frames = []
        for i in range(len(self.dataset)):
            b = render_bubble(i, self.dataset, self.region, self.params, self.fc, settings, mode="erase")
            frames.append(b.image)
        return frames


class _ReplaceStage(_Stage):
    name = "replace"

    def __init__(self, dataset, provider, config, field_config, bg_frames, prompt, **kw):
        super().__init__(dataset, provider, config, field_config, **kw)
        if len(bg_frames) != len(dataset):
            raise Ram3dError(f"{len(bg_frames)} background frames for {len(dataset)} views")
        self.bg_frames = [np.asarray(b, dtype=np.float64) for b in bg_frames]
        self.prompt = prompt
        self.last_bubble = None

    def background(self, i, step):
        if self.config.swap_background(step):
            color = step_rng(self.config.seed, _BACKGROUND, step).random(3)
            return np.broadcast_to(color, self.bg_frames[i].shape).copy(), True
        return self.bg_frames[i], False

    def step(self, step):
        i = self.pick_view(step)
        bubble = render_bubble(i, self.dataset, "mask", self.params, self.fc, self.settings,
                               step_rng(self.config.seed, _RENDER, step), mode="replace", keep_cache=True)
        bg, _ = self.background(i, step)
        x = composite(bubble.image, bubble.alpha, bg)
        hifa, g_x, _ = self.distill(i, x, bg, self.prompt, self.config.cfg_scale_replace, step)
        g_rgb, g_alpha = composite_backward(g_x, bg)
        grads = render_backward(bubble, self.params, self.fc, g_rgb, g_alpha)
        self.last_bubble = bubble
        parts = {"hifa": hifa, "recon": 0.0, "vgg": 0.0, "depth": 0.0}
        parts["total"] = replace_total(parts)
        return parts, grads

    def final_frames(self):
        settings = self.config.render_settings(jitter=False)
        frames, alphas = [], []
        for i in range(len(self.dataset)):
            b = render_bubble(i, self.dataset, "mask", self.params, self.fc, settings, mode="replace")
            frames.append(composite(b.image, b.alpha, self.bg_frames[i]))
            alphas.append(b.alpha)
        return frames, alphas


def composite(fg_rgb, alpha, bg):
    """Alpha blending A * x_fg + (1 - A) * x_bg.

    ``fg_rgb`` is the volume-rendered color, which already carries the factor
    A (it is sum w_i c_i), so the blend is ``fg_rgb + (1 - A) * bg``.
    """
    return fg_rgb + (1.0 - alpha)[..., None] * bg


def composite_backward(g_x, bg):
    """Cotangents on (rendered rgb, alpha); the background is a constant."""
    return g_x, -np.sum(g_x * bg, axis=-1)


def _resume(path, config, field_config):
    if path is None:
        return {}
    params, adam, step, _ = load_checkpoint(path, config, field_config)
    return {"params": params, "adam": adam, "start_step": step}


def run_erase(dataset: SceneDataset, provider: GuidanceProvider, objectives: Objectives, config: TrainConfig,
              field_config: FieldConfig, resume: str | None = None, stop_at: int | None = None,
              checkpoint_dir: str | None = None, callback=None) -> StageOutput:
    """Optimise a background field over mask and halo rays; returns inpainted frames."""
    stage = _EraseStage(dataset, provider, objectives, config, field_config,
                        **_resume(resume, config, field_config))
    history, end = stage.run(stop_at, checkpoint_dir, callback)
    return stage.output(history, end, stage.final_frames())


def run_replace(dataset: SceneDataset, bg_frames: Sequence[np.ndarray], provider: GuidanceProvider, prompt: str,
                config: TrainConfig, field_config: FieldConfig, resume: str | None = None,
                stop_at: int | None = None, checkpoint_dir: str | None = None, callback=None) -> StageOutput:
    """Optimise a foreground field over mask rays, composited over ``bg_frames``.

    Passing the input images as ``bg_frames`` gives object addition without an
    Erase stage.
    """
    stage = _ReplaceStage(dataset, provider, config, field_config, bg_frames, prompt,
                          **_resume(resume, config, field_config))
    history, end = stage.run(stop_at, checkpoint_dir, callback)
    frames, alphas = stage.final_frames()
    return stage.output(history, end, frames, alphas)


def run_monolithic(dataset: SceneDataset, provider: GuidanceProvider, prompt: str, config: TrainConfig,
                   field_config: FieldConfig, objectives: Objectives | None = None, resume: str | None = None,
                   stop_at: int | None = None, checkpoint_dir: str | None = None, callback=None) -> StageOutput:
    """One field over mask and halo, prompted, with halo supervision and no compositing."""
    objectives = objectives or Objectives()
    stage = _EraseStage(dataset, provider, objectives, config, field_config, prompt=prompt,
                        cfg_scale=config.cfg_scale_replace, use_depth=False,
                        **_resume(resume, config, field_config))
    stage.name = "monolithic"
    history, end = stage.run(stop_at, checkpoint_dir, callback)
    return stage.output(history, end, stage.final_frames())
