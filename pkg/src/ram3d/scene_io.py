"""Multiview dataset ingestion, mask/halo geometry, denoiser crops and export.

Dataset directory layout::

    images/NNN.png     8-bit RGB
    masks/NNN.png      8-bit gray, binarized at 127
    cameras.json       {"convention": "opengl", "frames": [{file, width, height,
                        fx, fy, cx, cy, cam_to_world: [12 floats], near, far}]}

Images are held as float arrays in [0, 1] (H, W, 3) and masks as bool (H, W).
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import CountMismatch, EmptyMask, IoError, ParseError, ShapeError

MASK_THRESHOLD = 127
CAMERA_KEYS = ("file", "width", "height", "fx", "fy", "cx", "cy", "cam_to_world", "near", "far")


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    cam_to_world: np.ndarray  # (3, 4), OpenGL axes: right, up, backward
    near: float
    far: float

    def __post_init__(self):
        c2w = np.asarray(self.cam_to_world, dtype=np.float64).reshape(3, 4)
        object.__setattr__(self, "cam_to_world", c2w)
        if not (self.fx > 0 and self.fy > 0):
            raise ParseError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.near < self.far):
            raise ParseError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        rot = c2w[:, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6:
            raise ParseError("cam_to_world rotation block is not orthonormal")

    def to_record(self, file: str) -> dict:
        return {
            "file": file,
            "width": int(self.width),
            "height": int(self.height),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "cam_to_world": [float(v) for v in self.cam_to_world.reshape(-1)],
            "near": float(self.near),
            "far": float(self.far),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Camera":
        missing = [k for k in CAMERA_KEYS if k not in rec]
        if missing:
            raise ParseError(f"camera record missing keys {missing}")
        c2w = rec["cam_to_world"]
        if not isinstance(c2w, list) or len(c2w) != 12:
            raise ParseError("cam_to_world must be a list of 12 floats")
        try:
            return cls(
                width=int(rec["width"]),
                height=int(rec["height"]),
                fx=float(rec["fx"]),
                fy=float(rec["fy"]),
                cx=float(rec["cx"]),
                cy=float(rec["cy"]),
                cam_to_world=np.array(c2w, dtype=np.float64),
                near=float(rec["near"]),
                far=float(rec["far"]),
            )
        except (TypeError, ValueError) as exc:
            raise ParseError(f"malformed camera record: {exc}") from exc


@dataclass(frozen=True)
class RegionSet:
    """Inpainting mask plus the halo ring around it; exterior is the rest."""

    mask: np.ndarray
    halo: np.ndarray

    @property
    def exterior(self) -> np.ndarray:
        return ~(self.mask | self.halo)

    @property
    def bubble(self) -> np.ndarray:
        return self.mask | self.halo

    def check_partition(self):
        if self.mask.shape != self.halo.shape:
            raise ShapeError("mask and halo shapes differ")
        if np.any(self.mask & self.halo):
            raise ShapeError("mask and halo overlap")


@dataclass(frozen=True)
class Frame:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    camera: Camera
    regions: RegionSet
    raw_mask: np.ndarray  # binarized input mask before dilation
    name: str = ""


@dataclass(frozen=True)
class SceneDataset:
    frames: tuple
    scene_name: str = "scene"
    guidance_resolution: int = 512

    def __len__(self):
        return len(self.frames)

    @property
    def images(self):
        return [f.image for f in self.frames]


class CropMode(str, enum.Enum):
    CENTER_HEIGHT = "center_height"
    LEFT_MOST = "left_most"
    MASK_ADAPTIVE = "mask_adaptive"


@dataclass(frozen=True)
class CropSpec:
    x0: int
    y0: int
    side: int
    resample_to: int


@dataclass
class DatasetConfig:
    dilation_radius: int = 8
    halo_width: int = 16
    guidance_resolution: int = 512
    crop_mode: str = CropMode.CENTER_HEIGHT.value
    scene_name: str = ""


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a (2r+1) x (2r+1) square; pixels past the border are ignored."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    return ndimage.maximum_filter(mask, size=2 * radius + 1, mode="constant", cval=False)


def compute_halo(mask: np.ndarray, width: int) -> RegionSet:
    if width < 1:
        raise ValueError("halo width must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    halo = dilate_mask(mask, width) & ~mask
    regions = RegionSet(mask=mask.copy(), halo=halo)
    regions.check_partition()
    return regions


def mask_bbox(mask: np.ndarray):
    """Inclusive (row0, row1, col0, col1) of the true pixels."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise EmptyMask("mask has no pixels")
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def compute_crop(region: RegionSet, frame_w: int, frame_h: int, mode, resample_to: int | None = None) -> CropSpec:
    mode = CropMode(mode)
    if mode is CropMode.CENTER_HEIGHT:
        side = min(frame_h, frame_w)
        x0, y0 = (frame_w - side) // 2, (frame_h - side) // 2
    elif mode is CropMode.LEFT_MOST:
        side = min(frame_h, frame_w)
        x0, y0 = 0, (frame_h - side) // 2
    else:
        r0, r1, c0, c1 = mask_bbox(region.mask)
        h, w = r1 - r0 + 1, c1 - c0 + 1
        cy, cx = (r0 + r1 + 1) / 2.0, (c0 + c1 + 1) / 2.0
        side = min(2 * max(h, w), frame_w, frame_h)
        x0 = int(np.floor(cx - side / 2.0 + 0.5))
        y0 = int(np.floor(cy - side / 2.0 + 0.5))
        x0 = min(max(x0, 0), frame_w - side)
        y0 = min(max(y0, 0), frame_h - side)
    return CropSpec(x0=x0, y0=y0, side=side, resample_to=resample_to or side)


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear resampling operator (n_out, n_in) with half-pixel centres.

    Upsampling is plain bilinear; downsampling widens the triangle filter by
    the scale factor so the result is area-like rather than aliased.
    """
    if n_in == n_out:
        return np.eye(n_out)
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.arange(n_in)
    weights = np.clip(1.0 - np.abs(src[None, :] - centers[:, None]) / support, 0.0, None)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def apply_crop(image: np.ndarray, spec: CropSpec) -> np.ndarray:
    """Crop a square and resample it to ``spec.resample_to`` (works for (H, W) or (H, W, C))."""
    sub = image[spec.y0:spec.y0 + spec.side, spec.x0:spec.x0 + spec.side]
    if spec.side == spec.resample_to:
        return sub.copy()
    m = resample_matrix(spec.side, spec.resample_to)
    if sub.ndim == 2:
        return m @ sub @ m.T
    return np.einsum("ij,jkc,lk->ilc", m, sub, m)


def crop_adjoint(grad: np.ndarray, spec: CropSpec, frame_shape) -> np.ndarray:
    """Adjoint of :func:`apply_crop`: scatters a crop-space cotangent back to the frame."""
    out = np.zeros(tuple(frame_shape[:2]) + grad.shape[2:], dtype=grad.dtype)
    if spec.side == spec.resample_to:
        sub = grad
    else:
        m = resample_matrix(spec.side, spec.resample_to)
        if grad.ndim == 2:
            sub = m.T @ grad @ m
        else:
            sub = np.einsum("ij,ilc,lk->jkc", m, grad, m)
    out[spec.y0:spec.y0 + spec.side, spec.x0:spec.x0 + spec.side] = sub
    return out


def crop_mask(mask: np.ndarray, spec: CropSpec) -> np.ndarray:
    return apply_crop(mask.astype(np.float64), spec) > 0.5


def _list_pngs(path):
    if not os.path.isdir(path):
        raise CountMismatch(f"missing directory {path}")
    return sorted(f for f in os.listdir(path) if f.lower().endswith(".png"))


def read_image(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def read_mask(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return arr > MASK_THRESHOLD


def list_frame_files(path: str):
    """Sorted per-view .png or .npy files of a directory (not both)."""
    if not os.path.isdir(path):
        raise CountMismatch(f"missing directory {path}")
    pngs = sorted(f for f in os.listdir(path) if f.lower().endswith(".png"))
    npys = sorted(f for f in os.listdir(path) if f.lower().endswith(".npy"))
    if pngs and npys:
        raise CountMismatch(f"{path} mixes .png and .npy frames")
    return [os.path.join(path, f) for f in (npys or pngs)]


def read_array(path: str) -> np.ndarray:
    """Float frame from .npy (as stored) or .png (scaled to [0, 1])."""
    if path.lower().endswith(".npy"):
        try:
            return np.asarray(np.load(path), dtype=np.float64)
        except (OSError, ValueError) as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc
    return read_image(path)


def read_frames(path: str):
    return [read_array(f) for f in list_frame_files(path)]


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path: str, image: np.ndarray):
    arr = image if image.dtype == np.uint8 else to_uint8(image)
    try:
        Image.fromarray(arr).save(path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_dataset(root_path: str, config: DatasetConfig | None = None) -> SceneDataset:
    config = config or DatasetConfig()
    if not os.path.isdir(root_path):
        raise CountMismatch(f"dataset directory {root_path} does not exist")
    image_files = _list_pngs(os.path.join(root_path, "images"))
    mask_files = _list_pngs(os.path.join(root_path, "masks"))
    cam_path = os.path.join(root_path, "cameras.json")
    if not os.path.exists(cam_path):
        raise CountMismatch(f"missing {cam_path}")
    try:
        with open(cam_path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"cameras.json is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("frames"), list):
        raise ParseError("cameras.json must hold an object with a 'frames' list")
    if doc.get("convention", "opengl") != "opengl":
        raise ParseError(f"unsupported camera convention {doc.get('convention')!r}")
    records = doc["frames"]
    if not (len(image_files) == len(mask_files) == len(records)) or not image_files:
        raise CountMismatch(
            f"{len(image_files)} images, {len(mask_files)} masks, {len(records)} cameras"
        )
    if image_files != mask_files:
        raise CountMismatch("image and mask file names differ")
    try:
        records = sorted(records, key=lambda r: r["file"])
    except (KeyError, TypeError) as exc:
        raise ParseError("every camera record needs a 'file' key") from exc
    if [r["file"] for r in records] != image_files:
        raise CountMismatch("camera records do not match image files")

    frames = []
    for name, rec in zip(image_files, records):
        cam = Camera.from_record(rec)
        image = read_image(os.path.join(root_path, "images", name))
        raw = read_mask(os.path.join(root_path, "masks", name))
        if image.shape[:2] != (cam.height, cam.width):
            raise ShapeError(f"{name}: image {image.shape[:2]} vs camera {(cam.height, cam.width)}")
        if raw.shape != image.shape[:2]:
            raise ShapeError(f"{name}: mask {raw.shape} vs image {image.shape[:2]}")
        mask = dilate_mask(raw, config.dilation_radius)
        regions = compute_halo(mask, config.halo_width)
        frames.append(Frame(image=image, camera=cam, regions=regions, raw_mask=raw, name=name))
    scene = config.scene_name or os.path.basename(os.path.normpath(root_path))
    return SceneDataset(frames=tuple(frames), scene_name=scene,
                        guidance_resolution=config.guidance_resolution)


def write_dataset(out_path: str, images: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                  cameras: Sequence[Camera], names: Sequence[str] | None = None):
    """Write frames in the dataset layout (also used to materialize synthetic scenes)."""
    if not (len(images) == len(masks) == len(cameras)):
        raise CountMismatch("images, masks and cameras must have equal length")
    names = list(names) if names else [f"{i:03d}.png" for i in range(len(images))]
    try:
        os.makedirs(os.path.join(out_path, "images"), exist_ok=True)
        os.makedirs(os.path.join(out_path, "masks"), exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_path}: {exc}") from exc
    for name, img, m in zip(names, images, masks):
        write_image(os.path.join(out_path, "images", name), img)
        write_image(os.path.join(out_path, "masks", name), np.where(m, 255, 0).astype(np.uint8))
    doc = {"convention": "opengl", "frames": [c.to_record(n) for n, c in zip(names, cameras)]}
    try:
        with open(os.path.join(out_path, "cameras.json"), "w") as fh:
            json.dump(doc, fh, indent=1)
    except OSError as exc:
        raise IoError(f"cannot write cameras.json: {exc}") from exc


def export_edited_dataset(dataset: SceneDataset, edits: Sequence[np.ndarray], out_path: str):
    """Write the edited multiview dataset: edits inside each mask, input bytes elsewhere."""
    if len(edits) != len(dataset.frames):
        raise CountMismatch(f"{len(edits)} edits for {len(dataset.frames)} frames")
    images = []
    for frame, edit in zip(dataset.frames, edits):
        if edit.shape != frame.image.shape:
            raise ShapeError(f"{frame.name}: edit shape {edit.shape} vs {frame.image.shape}")
        inside = frame.regions.mask[..., None]
        images.append(np.where(inside, to_uint8(edit), to_uint8(frame.image)))
    write_dataset(out_path, images, [f.raw_mask for f in dataset.frames],
                  [f.camera for f in dataset.frames],
                  [f.name or f"{i:03d}.png" for i, f in enumerate(dataset.frames)])
