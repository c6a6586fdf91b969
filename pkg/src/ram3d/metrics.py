"""Embedding-direction edit metrics and the prompt-phrasing report.

Both metrics work on differences of unit embeddings; any model with image
and text towers (CLIP or a stand-in) plugs in through EmbeddingProvider.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

import numpy as np

from .errors import Ram3dError
from .scene_io import resample_matrix

ZERO_NORM = 1e-8
REPORT_COLUMNS = ("scene", "prompt_src", "prompt_tgt", "dir_similarity", "dir_consistency")


class MetricError(Ram3dError):
    category = "data"


class EmbeddingProvider:
    """Image and text encoders into a shared space; outputs are unit vectors."""

    name = "abstract"
    dim: int = 0

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def embed_text(self, text: str) -> np.ndarray:
        raise NotImplementedError


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def image_key(image) -> str:
    """Content hash of an image; float and 8-bit copies of the same picture hash differently."""
    a = np.ascontiguousarray(image)
    h = hashlib.sha256()
    h.update(str(a.dtype).encode())
    h.update(str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


class TableEmbeddingProvider(EmbeddingProvider):
    """Looks embeddings up in fixed tables; used to build exact fixtures.

    Images are keyed by :func:`image_key`, texts by the string itself.
    """

    name = "table"

    def __init__(self, images: Mapping[str, np.ndarray], texts: Mapping[str, np.ndarray]):
        self.images = {k: _unit(v) for k, v in images.items()}
        self.texts = {k: _unit(v) for k, v in texts.items()}
        dims = {v.shape[0] for v in list(self.images.values()) + list(self.texts.values())}
        if len(dims) > 1:
            raise MetricError(f"embedding tables disagree on dimension: {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    def embed_image(self, image):
        try:
            return self.images[image_key(image)]
        except KeyError:
            raise MetricError("image not in the embedding table") from None

    def embed_text(self, text):
        try:
            return self.texts[text]
        except KeyError:
            raise MetricError(f"prompt not in the embedding table: {text!r}") from None


class ProjectionEmbeddingProvider(EmbeddingProvider):
    """Fixed random projection of downsampled pixels; text via a seeded hash.

    Not a semantic model: a deterministic stand-in that lets the pipeline and
    report run end to end without pretrained weights.
    """

    name = "projection"

    def __init__(self, dim: int = 64, grid: int = 8, seed: int = 0):
        self.dim = dim
        self.grid = grid
        self.proj = np.random.default_rng(seed).normal(size=(grid * grid * 3, dim))
        self.seed = seed

    def embed_image(self, image):
        img = np.asarray(image, dtype=np.float64)
        if img.dtype.kind in "ui" or img.max(initial=0.0) > 1.0:
            img = img / 255.0
        h, w = img.shape[:2]
        pooled = np.einsum("ij,jkc,lk->ilc", resample_matrix(h, self.grid), img, resample_matrix(w, self.grid))
        return _unit(pooled.reshape(-1) @ self.proj)

    def embed_text(self, text):
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little") ^ self.seed
        return _unit(np.random.default_rng(seed).normal(size=self.dim))


def _cos(a, b):
    aa, bb = float(np.dot(a, a)), float(np.dot(b, b))
    if aa < ZERO_NORM ** 2 or bb < ZERO_NORM ** 2:
        return 0.0
    # one square root of the product keeps cos(a, +-a) exactly +-1
    return float(np.clip(np.dot(a, b) / np.sqrt(aa * bb), -1.0, 1.0))


def _image_directions(orig_imgs, edit_imgs, provider):
    if len(orig_imgs) != len(edit_imgs):
        raise MetricError(f"{len(orig_imgs)} original frames but {len(edit_imgs)} edited frames")
    if len(orig_imgs) == 0:
        raise MetricError("no frames to evaluate")
    return [provider.embed_image(e) - provider.embed_image(o) for o, e in zip(orig_imgs, edit_imgs)]


def direction_similarity(orig_imgs: Sequence, edit_imgs: Sequence, src_prompt: str, tgt_prompt: str,
                         provider: EmbeddingProvider) -> float:
    """Mean cosine between per-frame image edit directions and the text edit direction."""
    dirs = _image_directions(orig_imgs, edit_imgs, provider)
    text_dir = provider.embed_text(tgt_prompt) - provider.embed_text(src_prompt)
    return float(np.mean([_cos(d, text_dir) for d in dirs]))


def direction_consistency(orig_imgs: Sequence, edit_imgs: Sequence, provider: EmbeddingProvider) -> float:
    """Mean cosine between edit directions of consecutive frames along the camera path."""
    if len(orig_imgs) < 2:
        raise MetricError("direction consistency needs at least two frames")
    dirs = _image_directions(orig_imgs, edit_imgs, provider)
    return float(np.mean([_cos(a, b) for a, b in zip(dirs[:-1], dirs[1:])]))


@dataclass
class ReportRow:
    scene: str
    prompt_src: str
    prompt_tgt: str
    dir_similarity: float
    dir_consistency: float


@dataclass
class EvalReport:
    rows: List[ReportRow] = field(default_factory=list)
    meta: Dict[str, str] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r.scene, r.prompt_src, r.prompt_tgt, repr(r.dir_similarity), repr(r.dir_consistency)])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise MetricError(f"unexpected report columns {reader.fieldnames}")
        rows = [ReportRow(r["scene"], r["prompt_src"], r["prompt_tgt"],
                          float(r["dir_similarity"]), float(r["dir_consistency"])) for r in reader]
        return cls(rows)

    def table(self) -> str:
        """Fixed-width text table, one line per row."""
        head = ["Scene", "Source prompt", "Target prompt", "Dir. sim.", "Dir. cons."]
        body = [[r.scene, r.prompt_src, r.prompt_tgt, f"{r.dir_similarity:.4f}", f"{r.dir_consistency:.4f}"]
                for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        fmt = lambda cells: "  ".join(c.ljust(wd) for c, wd in zip(cells, widths)).rstrip()
        lines = [fmt(head), fmt(["-" * wd for wd in widths])] + [fmt(b) for b in body]
        return "\n".join(lines)


@dataclass
class EditSet:
    """Pose-matched original and edited frames of one scene."""

    scene: str
    orig: Sequence[np.ndarray]
    edit: Sequence[np.ndarray]


def prompt_sensitivity_report(datasets: Sequence[EditSet], prompt_variants: Mapping[str, Sequence[tuple]],
                              provider: EmbeddingProvider) -> EvalReport:
    """Score each scene under several phrasings of the same edit.

    ``prompt_variants`` maps a scene name to its (src, tgt) phrasings; at
    least two per scene.
    """
    report = EvalReport(meta={"provider": getattr(provider, "name", type(provider).__name__)})
    for ds in datasets:
        variants = list(prompt_variants.get(ds.scene, ()))
        if len(variants) < 2:
            raise MetricError(f"scene {ds.scene!r}: need at least two prompt phrasings, got {len(variants)}")
        cons = direction_consistency(ds.orig, ds.edit, provider)
        for src, tgt in variants:
            sim = direction_similarity(ds.orig, ds.edit, src, tgt, provider)
            report.rows.append(ReportRow(ds.scene, src, tgt, sim, cons))
    return report
