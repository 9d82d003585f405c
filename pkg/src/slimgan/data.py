"""Deterministic synthetic image-translation datasets plus folder ingestion.

Two desk-scale tasks stand in for the usual benchmarks:

  * paired_edges2blobs - filled random ellipses/polygons as targets, their
    binarized edge maps as inputs (a contours-to-photo analog);
  * unpaired_palette_shift - one scene family rendered under a warm hue
    palette (domain A) and a cool one (domain B), independently shuffled.

Every emitted image is (3, R, R) float64 in [-1, 1] and a pure function of
the DatasetSpec, so dataset bytes reproduce exactly from (task, seed, sizes).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image

from .core import ConfigError, DataError, ValidationError, parameter_digest, seeded_rng

WARM_HUE_RANGE = (0.0, 0.15)   # domain A of the unpaired task
COOL_HUE_RANGE = (0.5, 0.65)   # domain B; mean hue offset is 0.5 by construction

_RASTER_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass(frozen=True)
class DatasetSpec:
    task: str = "paired_edges2blobs"
    resolution: int = 64
    n_train: int = 256
    n_eval: int = 64
    seed: int = 0
    data_dir: str = ""
    paired: bool = True

    def __post_init__(self):
        if self.task not in ("paired_edges2blobs", "unpaired_palette_shift", "folder"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.resolution % 4 != 0 or self.resolution <= 0:
            raise ConfigError("resolution must be a positive multiple of 4")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("n_train and n_eval must be >= 1")

    @classmethod
    def from_config(cls, cfg):
        return cls(
            task=cfg.task,
            resolution=cfg.resolution,
            n_train=cfg.n_train,
            n_eval=cfg.n_eval,
            seed=cfg.seed,
            data_dir=cfg.data_dir,
            paired=cfg.paired,
        )


# ---------------------------------------------------------------------------
# Scene rendering


def _ellipse_mask(res, cx, cy, a, b, theta):
    ys, xs = np.meshgrid(np.linspace(0, 1, res), np.linspace(0, 1, res), indexing="ij")
    dx, dy = xs - cx, ys - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _convex_polygon_mask(res, pts):
    ys, xs = np.meshgrid(np.linspace(0, 1, res), np.linspace(0, 1, res), indexing="ij")
    inside = np.ones((res, res), dtype=bool)
    n = len(pts)
    for i in range(n):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % n]
        # counter-clockwise vertex order => interior has non-negative cross product
        inside &= (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1) >= 0
    return inside


def render_scene(rng, resolution, n_shapes, hue_range=None):
    """Paint n_shapes random filled shapes on a gray canvas.

    Returns (image, labels): image is (3, R, R) in [-1, 1], labels is (R, R)
    int with 0 for background and the 1-based paint index per shape.
    """
    bg = rng.uniform(0.72, 0.9)
    img = np.full((resolution, resolution, 3), bg, dtype=np.float64)
    labels = np.zeros((resolution, resolution), dtype=np.int32)
    for idx in range(1, n_shapes + 1):
        kind = int(rng.integers(0, 2))
        cx, cy = rng.uniform(0.15, 0.85, size=2)
        if kind == 0:
            a, b = rng.uniform(0.08, 0.28, size=2)
            theta = rng.uniform(0, np.pi)
            mask = _ellipse_mask(resolution, cx, cy, a, b, theta)
        else:
            n_vert = int(rng.integers(3, 7))
            angles = np.sort(rng.uniform(0, 2 * np.pi, size=n_vert))
            radii = rng.uniform(0.08, 0.28, size=n_vert)
            pts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
            mask = _convex_polygon_mask(resolution, pts)
        hue = rng.uniform(*hue_range) if hue_range else rng.uniform(0.0, 1.0)
        sat = rng.uniform(0.6, 1.0)
        val = rng.uniform(0.5, 0.95)
        img[mask] = hsv_to_rgb([hue, sat, val])
        labels[mask] = idx
    return np.transpose(img * 2.0 - 1.0, (2, 0, 1)), labels


def edge_map(labels):
    """Boundary pixels of the label map (4-neighbor differences)."""
    e = np.zeros(labels.shape, dtype=bool)
    d = labels[:-1, :] != labels[1:, :]
    e[:-1, :] |= d
    e[1:, :] |= d
    d = labels[:, :-1] != labels[:, 1:]
    e[:, :-1] |= d
    e[:, 1:] |= d
    return e


def edges_to_image(edges):
    x = np.where(edges, 1.0, -1.0)
    return np.repeat(x[None, :, :], 3, axis=0)


# ---------------------------------------------------------------------------
# Dataset generation


def gen_paired_dataset(spec: DatasetSpec, split: str = "train"):
    """Edge-map inputs and filled-scene targets; returns (x, y) arrays."""
    n = spec.n_train if split == "train" else spec.n_eval
    res = spec.resolution
    x = np.empty((n, 3, res, res), dtype=np.float64)
    y = np.empty((n, 3, res, res), dtype=np.float64)
    for i in range(n):
        rng = seeded_rng(spec.seed, f"paired/{split}/{i}")
        n_shapes = int(rng.integers(1, 5))
        img, labels = render_scene(rng, res, n_shapes)
        y[i] = img
        x[i] = edges_to_image(edge_map(labels))
    return x, y


def gen_unpaired_dataset(spec: DatasetSpec, split: str = "train"):
    """Warm-palette domain A and cool-palette domain B, independent streams."""
    n = spec.n_train if split == "train" else spec.n_eval
    res = spec.resolution
    a = np.empty((n, 3, res, res), dtype=np.float64)
    b = np.empty((n, 3, res, res), dtype=np.float64)
    for i in range(n):
        rng = seeded_rng(spec.seed, f"unpaired/a/{split}/{i}")
        a[i] = render_scene(rng, res, int(rng.integers(1, 5)), hue_range=WARM_HUE_RANGE)[0]
        rng = seeded_rng(spec.seed, f"unpaired/b/{split}/{i}")
        b[i] = render_scene(rng, res, int(rng.integers(1, 5)), hue_range=COOL_HUE_RANGE)[0]
    return a, b


def load_image_folder(path, resolution):
    """Load a directory of 8-bit RGB rasters as (n, 3, R, R) in [-1, 1].

    Files are taken in lexicographic order so repeated loads agree.
    """
    if not os.path.isdir(path):
        raise DataError(f"not a directory: {path}")
    names = sorted(n for n in os.listdir(path) if n.lower().endswith(_RASTER_SUFFIXES))
    if not names:
        raise DataError(f"no raster images in {path}")
    out = np.empty((len(names), 3, resolution, resolution), dtype=np.float64)
    for i, name in enumerate(names):
        fpath = os.path.join(path, name)
        try:
            with Image.open(fpath) as im:
                im = im.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float64)
        except Exception as e:
            raise DataError(f"unreadable image {fpath}: {e}") from e
        out[i] = np.transpose(arr / 255.0 * 2.0 - 1.0, (2, 0, 1))
    return out


def load_folder_dataset(data_dir, resolution, paired: bool):
    """Load a/ and b/ subfolders (train) plus a_eval/ and b_eval/ if present."""
    a = load_image_folder(os.path.join(data_dir, "a"), resolution)
    b = load_image_folder(os.path.join(data_dir, "b"), resolution)
    if paired and len(a) != len(b):
        raise DataError(f"paired folders differ in size: a has {len(a)}, b has {len(b)}")
    if os.path.isdir(os.path.join(data_dir, "a_eval")) and os.path.isdir(os.path.join(data_dir, "b_eval")):
        ae = load_image_folder(os.path.join(data_dir, "a_eval"), resolution)
        be = load_image_folder(os.path.join(data_dir, "b_eval"), resolution)
    else:
        ae, be = a, b
    return (a, b), (ae, be)


def batch_iterator(arrays, batch_size, shuffle_seed, epoch, stream: str = ""):
    """Yield whole batches in a deterministic per-epoch shuffle order.

    arrays may be a single (n, ...) array or a tuple of co-indexed arrays
    (shuffled with one shared permutation).  The order is a pure function of
    (shuffle_seed, stream, epoch); the final partial batch is dropped.
    """
    single = not isinstance(arrays, tuple)
    parts = (arrays,) if single else arrays
    n = len(parts[0])
    if any(len(p) != n for p in parts):
        raise ValidationError("co-indexed arrays differ in length")
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    if batch_size > n:
        raise ValidationError(f"batch_size {batch_size} exceeds dataset size {n}")
    perm = seeded_rng(shuffle_seed, f"shuffle/{stream}/{epoch}").permutation(n)
    for b in range(n // batch_size):
        idx = perm[b * batch_size : (b + 1) * batch_size]
        picked = tuple(p[idx] for p in parts)
        yield picked[0] if single else picked


def batches_per_epoch(n_items, batch_size):
    return n_items // batch_size


# ---------------------------------------------------------------------------
# On-disk dataset folders (gen-data subcommand)


def to_uint8(img_chw):
    """[-1, 1] float image to HWC uint8; -1 maps to 0 and +1 to 255."""
    v = np.clip((np.transpose(img_chw, (1, 2, 0)) + 1.0) * 127.5, 0.0, 255.0)
    return np.round(v).astype(np.uint8)


def save_image_png(path, img_chw):
    Image.fromarray(to_uint8(img_chw)).save(path)


def dataset_arrays(spec: DatasetSpec):
    """All splits of a synthetic dataset as a named-array mapping."""
    if spec.task == "paired_edges2blobs":
        tx, ty = gen_paired_dataset(spec, "train")
        ex, ey = gen_paired_dataset(spec, "eval")
        return {"train_a": tx, "train_b": ty, "eval_a": ex, "eval_b": ey}
    if spec.task == "unpaired_palette_shift":
        ta, tb = gen_unpaired_dataset(spec, "train")
        ea, eb = gen_unpaired_dataset(spec, "eval")
        return {"train_a": ta, "train_b": tb, "eval_a": ea, "eval_b": eb}
    raise ConfigError(f"task {spec.task!r} is not a synthetic dataset")


def dataset_digest(spec: DatasetSpec) -> str:
    return parameter_digest(dataset_arrays(spec))


def write_dataset_folder(spec: DatasetSpec, out_dir):
    """Render a synthetic dataset to PNG folders plus a reproducibility manifest."""
    arrays = dataset_arrays(spec)
    digest = parameter_digest(arrays)
    subdir_of = {"train_a": "a", "train_b": "b", "eval_a": "a_eval", "eval_b": "b_eval"}
    for split, arr in arrays.items():
        d = os.path.join(out_dir, subdir_of[split])
        os.makedirs(d, exist_ok=True)
        for i in range(len(arr)):
            save_image_png(os.path.join(d, f"{i:05d}.png"), arr[i])
    manifest = {
        "task": spec.task,
        "resolution": spec.resolution,
        "n_train": spec.n_train,
        "n_eval": spec.n_eval,
        "seed": spec.seed,
        "paired": spec.task == "paired_edges2blobs",
        "digest": digest,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
