"""Desk-scale Fréchet metric, analytic complexity counting, sample dumps.

The metric embeds images with a small fixed seeded extractor instead of a
large pretrained classifier, so absolute values are only comparable between
runs that share the same embedder digest.  Every report carries that digest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .core import ParameterSet, ShapeError, UnsupportedLayerError, ValidationError, check_image_range
from .data import save_image_png
from .nets import DownsamplerBank, downsample_to_image

EMBEDDER_NOTE = (
    "desk-FID uses a small fixed seeded embedder; values are only comparable "
    "between runs sharing the same embedder_digest, not with any published FID"
)


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.shape[0]
        if d < 1:
            raise ValidationError("GaussianStats needs dimension >= 1")
        if self.cov.shape != (d, d):
            raise ShapeError(f"covariance shape {self.cov.shape} does not match dimension {d}")
        if self.n < 2:
            raise ValidationError("GaussianStats needs n >= 2")
        if np.abs(self.cov - self.cov.T).max() > 1e-9:
            raise ValidationError("covariance not symmetric within 1e-9")


def embed_batch(embedder, imgs) -> np.ndarray:
    """Embed images: final extractor block, global-average-pooled to (N, d)."""
    if isinstance(imgs, np.ndarray):
        imgs = torch.from_numpy(np.ascontiguousarray(imgs))
    p = next(embedder.parameters())
    imgs = imgs.to(p.dtype)
    check_image_range(imgs, "embedder input")
    with torch.no_grad():
        feats = embedder(imgs)
        vecs = feats.mean(dim=(2, 3))
    return vecs.cpu().numpy().astype(np.float64)


def gaussian_stats(vectors) -> GaussianStats:
    """Sample mean and unbiased covariance, symmetrized as (S + S^T)/2."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"expected (n, d) vectors, got shape {v.shape}")
    n = v.shape[0]
    if n < 2:
        raise ValidationError("need at least 2 vectors for covariance")
    mean = v.mean(axis=0)
    xc = v - mean
    cov = xc.T @ xc / (n - 1)
    cov = (cov + cov.T) / 2.0
    return GaussianStats(mean=mean, cov=cov, n=n)


def _clipped_eigh(m, tol):
    vals, vecs = np.linalg.eigh(m)
    bound = tol * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -bound:
        raise ValidationError(f"matrix not PSD within tolerance (min eigenvalue {vals.min():.3e})")
    return np.clip(vals, 0.0, None), vecs


def spd_sqrt(m, tol: float = 1e-8):
    """Symmetric PSD square root via eigendecomposition."""
    vals, vecs = _clipped_eigh(np.asarray(m, dtype=np.float64), tol)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats, tol: float = 1e-8) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).

    The inner square root uses the symmetric form so a single
    eigendecomposition suffices; eigenvalues more negative than the (scale
    relative) tolerance raise, smaller ones clip to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    sqrt_a = spd_sqrt(a.cov, tol)
    inner = sqrt_a @ b.cov @ sqrt_a
    inner = (inner + inner.T) / 2.0
    vals, _ = _clipped_eigh(inner, tol)
    mean_term = float(np.sum((a.mean - b.mean) ** 2))
    trace_term = float(np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sum(np.sqrt(vals)))
    return max(mean_term + trace_term, 0.0)


@dataclass
class DeskFidReport:
    value: float
    n_samples: int
    embedder_digest: str
    note: str = EMBEDDER_NOTE


def desk_fid(generator, eval_x, real_y, embedder, n_samples, batch_size: int = 16) -> DeskFidReport:
    """Fréchet distance between embedded generator outputs and embedded reals."""
    if n_samples < 2:
        raise ValidationError("desk_fid needs n_samples >= 2")
    if n_samples > len(eval_x) or n_samples > len(real_y):
        raise ValidationError(
            f"n_samples {n_samples} exceeds available eval items ({len(eval_x)} inputs, {len(real_y)} reals)"
        )
    p = next(generator.parameters())
    gen_vecs = []
    with torch.no_grad():
        for start in range(0, n_samples, batch_size):
            xb = torch.from_numpy(np.ascontiguousarray(eval_x[start : min(start + batch_size, n_samples)]))
            out = generator(xb.to(p.dtype))
            gen_vecs.append(embed_batch(embedder, out))
    gen_stats = gaussian_stats(np.concatenate(gen_vecs, axis=0))
    real_vecs = []
    for start in range(0, n_samples, batch_size):
        yb = real_y[start : min(start + batch_size, n_samples)]
        real_vecs.append(embed_batch(embedder, yb))
    real_stats = gaussian_stats(np.concatenate(real_vecs, axis=0))
    value = frechet_distance(gen_stats, real_stats)
    digest = ParameterSet.of_module(embedder).digest()
    return DeskFidReport(value=value, n_samples=n_samples, embedder_digest=digest)


# ---------------------------------------------------------------------------
# Complexity accounting


@dataclass
class LayerCount:
    name: str
    kind: str
    params: int
    macs: int = 0


@dataclass
class ComplexityReport:
    layers: list = field(default_factory=list)
    total_params: int = 0
    total_macs: int = 0

    def as_json(self):
        return {
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "layers": [
                {"name": l.name, "kind": l.kind, "params": l.params, "macs": l.macs}
                for l in self.layers
            ],
        }


_ZERO_LAYERS = (nn.Tanh, nn.ReLU, nn.LeakyReLU, nn.Sigmoid, nn.Identity, nn.ReflectionPad2d, nn.Upsample)


def _layer_params(module, name):
    if isinstance(module, nn.Conv2d):
        kh, kw = module.kernel_size
        p = kh * kw * module.in_channels * module.out_channels
        if module.bias is not None:
            p += module.out_channels
        return "conv", p
    if isinstance(module, nn.InstanceNorm2d):
        return "norm", 2 * module.num_features if module.affine else 0
    if isinstance(module, _ZERO_LAYERS):
        return type(module).__name__.lower(), 0
    raise UnsupportedLayerError(f"unsupported layer {name!r} of type {type(module).__name__}")


def _leaves(model):
    return [(name, m) for name, m in model.named_modules() if not list(m.children())]


def count_params(model) -> ComplexityReport:
    """Per-layer parameter counts from layer arithmetic (not tensor sizes)."""
    report = ComplexityReport()
    for name, m in _leaves(model):
        kind, p = _layer_params(m, name)
        report.layers.append(LayerCount(name=name, kind=kind, params=p))
        report.total_params += p
    return report


def count_macs(model, resolution: int) -> ComplexityReport:
    """Multiply-accumulate counts at a square reference resolution.

    Output spatial sizes are captured by a dummy forward; the per-layer MAC
    formula is k_h * k_w * C_in * C_out * H_out * W_out for convolutions and
    zero for norms, activations, pads and resizes.
    """
    records = []
    names = {id(m): name for name, m in model.named_modules()}
    hooks = []

    def make_hook(mod):
        def hook(_mod, _inp, out):
            records.append((mod, tuple(out.shape)))

        return hook

    for _, m in _leaves(model):
        hooks.append(m.register_forward_hook(make_hook(m)))
    p = next(model.parameters())
    x = torch.zeros(1, getattr(model, "in_channels", 3), resolution, resolution, dtype=p.dtype)
    try:
        with torch.no_grad():
            model(x)
    finally:
        for h in hooks:
            h.remove()
    report = ComplexityReport()
    seen = set()
    for mod, out_shape in records:
        name = names[id(mod)]
        kind, params = _layer_params(mod, name)
        if id(mod) in seen:
            params = 0  # parameters counted once even if the layer runs twice
        seen.add(id(mod))
        macs = 0
        if isinstance(mod, nn.Conv2d):
            kh, kw = mod.kernel_size
            macs = kh * kw * mod.in_channels * mod.out_channels * out_shape[2] * out_shape[3]
        report.layers.append(LayerCount(name=name, kind=kind, params=params, macs=macs))
        report.total_params += params
        report.total_macs += macs
    return report


# ---------------------------------------------------------------------------
# Raster dumps


def dump_samples(generator, inputs, out_dir, step: int = 0):
    """Write generator outputs for the given inputs as 8-bit PNGs."""
    os.makedirs(out_dir, exist_ok=True)
    if isinstance(inputs, np.ndarray):
        inputs = torch.from_numpy(np.ascontiguousarray(inputs))
    p = next(generator.parameters())
    with torch.no_grad():
        out = generator(inputs.to(p.dtype)).cpu().numpy()
    paths = []
    for i in range(out.shape[0]):
        path = os.path.join(out_dir, f"step{step:06d}_sample{i:02d}.png")
        save_image_png(path, out[i])
        paths.append(path)
    return paths


def dump_feature_images(bank: DownsamplerBank, feats, out_dir, step: int = 0, target_hw=None):
    """Write each tap's projected feature-image (first batch item) as a PNG."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, feat in enumerate(feats):
        hw = target_hw or (int(feat.shape[2]), int(feat.shape[3]))
        with torch.no_grad():
            img = downsample_to_image(bank, i, feat, hw).cpu().numpy()
        path = os.path.join(out_dir, f"step{step:06d}_tap{i}.png")
        save_image_png(path, img[0])
        paths.append(path)
    return paths
