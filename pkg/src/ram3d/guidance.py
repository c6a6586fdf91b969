"""Score-distillation guidance: noise schedule, CFG, one-step latent estimate and
the latent + RGB distillation loss, behind a provider interface.

Providers expose a latent codec and a mask-conditioned noise predictor. Two are
shipped: :class:`OracleProvider`, a deterministic test double whose denoiser
always points at a known target image, and :class:`ExternalProvider`, which
talks to another process over a framed binary protocol (see
:func:`write_message`).
"""

from __future__ import annotations

import json
import math
import struct
import subprocess
import sys
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateTimestep, GuidanceError
from .scene_io import CropSpec, apply_crop

W_MODES = ("constant", "sigma_sq")
REDUCTIONS = ("mean", "sum")


class GuidanceProvider:
    """Interface for a frozen latent-diffusion inpainter.

    Latents and images are channels-last arrays: images (H, W, 3), latents
    (H / f, W / f, latent_channels).
    """

    latent_downsample_factor: int = 1
    latent_channels: int = 3

    def latent_encode(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def latent_decode(self, latent: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def encode_vjp(self, image: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product of the encoder at ``image``."""
        raise NotImplementedError

    def predict_noise(self, noisy_latent, t, prompt, mask, masked_image, *, view=None, crop=None):
        raise NotImplementedError


@dataclass
class NoiseSchedule:
    t_min: float = 0.2
    t_max: float = 0.98
    total_steps: int = 20000

    def __post_init__(self):
        if not (0.0 < self.t_min < self.t_max < 1.0):
            raise ValueError("need 0 < t_min < t_max < 1")

    @staticmethod
    def alpha(t):
        return np.cos(0.5 * np.pi * np.asarray(t, dtype=np.float64))

    @staticmethod
    def sigma(t):
        return np.sin(0.5 * np.pi * np.asarray(t, dtype=np.float64))


@dataclass
class DistillLossConfig:
    lambda_rgb: float = 0.1
    cfg_scale: float = 7.5
    w_of_t: str = "constant"
    reduction: str = "mean"

    def __post_init__(self):
        if self.lambda_rgb < 0 or self.cfg_scale < 0:
            raise ValueError("lambda_rgb and cfg_scale must be non-negative")
        if self.w_of_t not in W_MODES:
            raise ValueError(f"w_of_t must be one of {W_MODES}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")


def schedule_t(step: int, total: int, schedule: NoiseSchedule | None = None) -> float:
    """Noise level decaying from t_max to t_min with the square root of progress."""
    schedule = schedule or NoiseSchedule()
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step == 0:
        return schedule.t_max
    if step == total:
        return schedule.t_min
    return schedule.t_max - (schedule.t_max - schedule.t_min) * math.sqrt(step / total)


def add_noise(z, t, noise):
    z = np.asarray(z, dtype=np.float64)
    return NoiseSchedule.alpha(t) * z + NoiseSchedule.sigma(t) * np.asarray(noise, dtype=np.float64)


def cfg_combine(eps_cond, eps_uncond, s):
    """eps_uncond + s (eps_cond - eps_uncond), written so s = 0 and s = 1 are exact."""
    return (1.0 - s) * eps_uncond + s * eps_cond


def estimate_latent(z_t, t, eps_hat):
    a = float(NoiseSchedule.alpha(t))
    if t >= 1.0 or abs(a) < 1e-12:
        raise DegenerateTimestep(f"cannot invert the forward process at t={t}")
    return (np.asarray(z_t, dtype=np.float64) - NoiseSchedule.sigma(t) * eps_hat) / a


def time_weight(t, mode: str) -> float:
    if mode == "constant":
        return 1.0
    if mode == "sigma_sq":
        return float(NoiseSchedule.sigma(t) ** 2)
    raise ValueError(f"unknown weighting {mode!r}")


def distill_loss(x, provider: GuidanceProvider, prompt: str, mask, masked_image, t: float,
                 cfg: DistillLossConfig, rng, *, view=None, crop=None, return_estimate=False):
    """Distillation loss on an image already in provider resolution.

    loss = w(t) * (|z - z_hat|^2 + lambda_rgb * |x - x_hat|^2), each squared norm
    averaged over its elements when ``cfg.reduction == "mean"``. z_hat and
    x_hat are treated as constants, so the returned cotangent is
    w(t) * (2 E^T (z - z_hat) / n_z + 2 lambda_rgb (x - x_hat) / n_x).

    Returns ``(loss, dloss_dx)``, plus ``x_hat`` when ``return_estimate``.
    """
    x = np.asarray(x, dtype=np.float64)
    try:
        z = provider.latent_encode(x)
        noise = rng.standard_normal(z.shape)
        z_t = add_noise(z, t, noise)
        eps_c = provider.predict_noise(z_t, t, prompt, mask, masked_image, view=view, crop=crop)
        if cfg.cfg_scale == 1.0:
            eps = eps_c
        else:
            eps_u = provider.predict_noise(z_t, t, "", mask, masked_image, view=view, crop=crop)
            eps = cfg_combine(eps_c, eps_u, cfg.cfg_scale)
        z_hat = estimate_latent(z_t, t, eps)
        x_hat = provider.latent_decode(z_hat)
    except (DegenerateTimestep, GuidanceError):
        raise
    except Exception as exc:  # provider implementations are foreign code
        raise GuidanceError(f"guidance provider failed: {exc}") from exc
    if not (np.isfinite(z_hat).all() and np.isfinite(x_hat).all()):
        raise GuidanceError("provider returned non-finite predictions")
    w = time_weight(t, cfg.w_of_t)
    n_z, n_x = (z.size, x.size) if cfg.reduction == "mean" else (1, 1)
    dz = z - z_hat
    dx = x - x_hat
    loss = w * (np.sum(dz * dz) / n_z + cfg.lambda_rgb * np.sum(dx * dx) / n_x)
    grad = w * (2.0 * provider.encode_vjp(x, dz) / n_z + 2.0 * cfg.lambda_rgb * dx / n_x)
    if return_estimate:
        return float(loss), grad, x_hat
    return float(loss), grad


class OracleProvider(GuidanceProvider):
    """Deterministic stand-in for a frozen inpainting LDM.

    The codec is a ``factor`` x ``factor`` box average (encode) and a
    nearest-neighbour upsample (decode). ``predict_noise`` returns exactly the
    noise that maps the noisy latent back onto the encoding of the target
    composited into the mask region of the conditioning image, so the one-step
    estimate recovers that latent at every noise level. Conditional and
    unconditional predictions coincide, which makes CFG a no-op.

    ``targets`` holds one image or one per view. With ``alphas`` given,
    targets are premultiplied RGBA layers composited over the conditioning
    image; without, they replace the mask region outright.
    """

    def __init__(self, targets, factor: int = 1, alphas=None):
        if isinstance(targets, np.ndarray) and targets.ndim == 3:
            targets = [targets]
            alphas = None if alphas is None else [alphas]
        self.targets = [np.asarray(tg, dtype=np.float64) for tg in targets]
        self.alphas = None if alphas is None else [np.asarray(a, dtype=np.float64) for a in alphas]
        self.latent_downsample_factor = int(factor)
        self.latent_channels = 3

    def _check(self, image):
        f = self.latent_downsample_factor
        if image.shape[0] % f or image.shape[1] % f:
            raise GuidanceError(f"factor {f} does not divide image shape {image.shape[:2]}")

    def latent_encode(self, image):
        image = np.asarray(image, dtype=np.float64)
        self._check(image)
        f = self.latent_downsample_factor
        h, w, c = image.shape
        return image.reshape(h // f, f, w // f, f, c).mean(axis=(1, 3))

    def latent_decode(self, latent):
        f = self.latent_downsample_factor
        return np.repeat(np.repeat(np.asarray(latent, dtype=np.float64), f, axis=0), f, axis=1)

    def encode_vjp(self, image, cotangent):
        f = self.latent_downsample_factor
        return self.latent_decode(cotangent) / (f * f)

    def target_image(self, masked_image, mask, view=None, crop: CropSpec | None = None):
        i = 0 if len(self.targets) == 1 else view
        if i is None:
            raise GuidanceError("multi-view oracle needs a view index")
        target = self.targets[i]
        alpha = None if self.alphas is None else self.alphas[i]
        if crop is not None:
            target = apply_crop(target, crop)
            alpha = None if alpha is None else apply_crop(alpha, crop)
        cond = np.asarray(masked_image, dtype=np.float64)
        if target.shape != cond.shape:
            raise GuidanceError(f"target shape {target.shape} vs conditioning image {cond.shape}")
        inside = target if alpha is None else target + (1.0 - alpha)[..., None] * cond
        return np.where(np.asarray(mask, dtype=bool)[..., None], inside, cond)

    def predict_noise(self, noisy_latent, t, prompt, mask, masked_image, *, view=None, crop=None):
        z_target = self.latent_encode(self.target_image(masked_image, mask, view, crop))
        s = float(NoiseSchedule.sigma(t))
        if s == 0.0:
            return np.zeros_like(noisy_latent)
        return (np.asarray(noisy_latent, dtype=np.float64) - NoiseSchedule.alpha(t) * z_target) / s


def oracle_provider(target, factor: int = 1, alphas=None) -> OracleProvider:
    return OracleProvider(target, factor, alphas)


# -- external provider wire protocol -------------------------------------------------
#
# Each message: u32 little-endian header length, UTF-8 JSON header, then the
# arrays listed in header["arrays"] ([{name, shape}]) as little-endian f32.
# Requests carry header["op"] in {info, encode, decode, encode_vjp, predict_noise};
# responses carry header["ok"] and, on failure, header["error"].


def write_message(stream, header: dict, arrays: dict | None = None):
    arrays = arrays or {}
    header = dict(header)
    header["arrays"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    blob = json.dumps(header).encode("utf-8")
    stream.write(struct.pack("<I", len(blob)))
    stream.write(blob)
    for v in arrays.values():
        stream.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    stream.flush()


def _read_exact(stream, n):
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise GuidanceError("guidance stream closed mid-message")
        buf += chunk
    return buf


def read_message(stream):
    head = stream.read(4)
    if not head:
        return None, None
    if len(head) < 4:
        head += _read_exact(stream, 4 - len(head))
    (n,) = struct.unpack("<I", head)
    header = json.loads(_read_exact(stream, n).decode("utf-8"))
    arrays = {}
    for spec in header.get("arrays", []):
        count = int(np.prod(spec["shape"], dtype=np.int64))
        raw = _read_exact(stream, 4 * count)
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(spec["shape"]).astype(np.float64)
    return header, arrays


def _crop_header(crop):
    if crop is None:
        return None
    return {"x0": crop.x0, "y0": crop.y0, "side": crop.side, "resample_to": crop.resample_to}


def serve(provider: GuidanceProvider, instream, outstream):
    """Answer protocol requests until the input stream closes."""
    while True:
        header, arrays = read_message(instream)
        if header is None:
            return
        op = header.get("op")
        try:
            if op == "info":
                write_message(outstream, {"ok": True,
                                          "latent_downsample_factor": provider.latent_downsample_factor,
                                          "latent_channels": provider.latent_channels})
                continue
            if op == "encode":
                out = provider.latent_encode(arrays["image"])
            elif op == "decode":
                out = provider.latent_decode(arrays["latent"])
            elif op == "encode_vjp":
                out = provider.encode_vjp(arrays["image"], arrays["cotangent"])
            elif op == "predict_noise":
                crop = header.get("crop")
                out = provider.predict_noise(
                    arrays["noisy_latent"], header["t"], header["prompt"], arrays["mask"] > 0.5,
                    arrays["masked_image"], view=header.get("view"),
                    crop=CropSpec(**crop) if crop else None)
            else:
                raise GuidanceError(f"unknown op {op!r}")
            write_message(outstream, {"ok": True}, {"out": out})
        except Exception as exc:
            write_message(outstream, {"ok": False, "error": str(exc)})


class ExternalProvider(GuidanceProvider):
    """Client side of the wire protocol, speaking over a pair of byte streams.

    Use :meth:`spawn` to start a provider process and talk over its stdio.
    Arrays travel as f32, so results are float32-exact at best.
    """

    def __init__(self, instream, outstream, process=None):
        self._in = instream
        self._out = outstream
        self._process = process
        info = self._call({"op": "info"})[0]
        self.latent_downsample_factor = int(info["latent_downsample_factor"])
        self.latent_channels = int(info["latent_channels"])

    @classmethod
    def spawn(cls, command: Sequence[str]):
        proc = subprocess.Popen(list(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        return cls(proc.stdout, proc.stdin, proc)

    def _call(self, header, arrays=None):
        try:
            write_message(self._out, header, arrays)
            resp, out = read_message(self._in)
        except (OSError, ValueError) as exc:
            raise GuidanceError(f"external provider I/O failed: {exc}") from exc
        if resp is None:
            raise GuidanceError("external provider closed the connection")
        if not resp.get("ok"):
            raise GuidanceError(f"external provider error: {resp.get('error')}")
        return resp, out

    def latent_encode(self, image):
        return self._call({"op": "encode"}, {"image": image})[1]["out"]

    def latent_decode(self, latent):
        return self._call({"op": "decode"}, {"latent": latent})[1]["out"]

    def encode_vjp(self, image, cotangent):
        return self._call({"op": "encode_vjp"}, {"image": image, "cotangent": cotangent})[1]["out"]

    def predict_noise(self, noisy_latent, t, prompt, mask, masked_image, *, view=None, crop=None):
        header = {"op": "predict_noise", "t": float(t), "prompt": prompt,
                  "view": None if view is None else int(view), "crop": _crop_header(crop)}
        arrays = {"noisy_latent": noisy_latent, "mask": np.asarray(mask, dtype=np.float32),
                  "masked_image": masked_image}
        return self._call(header, arrays)[1]["out"]

    def close(self):
        if self._process is not None:
            self._out.close()
            self._process.wait(timeout=10)
            self._process = None


def _main(argv=None):
    """``python -m ram3d.guidance serve-oracle TARGET_DIR [--factor F]``: oracle over stdio.

    TARGET_DIR holds one .png or .npy target per view.
    """
    import argparse

    from .scene_io import read_frames

    p = argparse.ArgumentParser(prog="python -m ram3d.guidance")
    sub = p.add_subparsers(dest="cmd", required=True)
    s = sub.add_parser("serve-oracle")
    s.add_argument("target_dir")
    s.add_argument("--factor", type=int, default=1)
    args = p.parse_args(argv)
    provider = OracleProvider(read_frames(args.target_dir), args.factor)
    serve(provider, sys.stdin.buffer, sys.stdout.buffer)


if __name__ == "__main__":
    _main()
