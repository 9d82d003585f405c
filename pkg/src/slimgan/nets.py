"""Network builders: teacher/student generators, patch discriminator,
per-tap downsampler banks and the fixed feature extractor.

All builders take a numpy Generator for weight init, so identical seeds give
bit-identical parameters.  Models are built in float64 and cast afterwards
when a narrower dtype is requested.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    ConfigError,
    CorruptionError,
    ParameterSet,
    ShapeError,
    array_digest,
    check_image_range,
    parameter_digest,
)


@dataclass(frozen=True)
class GeneratorSpec:
    base_width: int = 16
    n_resblocks: int = 6
    width_factor: float = 1.0
    in_channels: int = 3
    out_channels: int = 3

    def __post_init__(self):
        if self.base_width < 1:
            raise ConfigError("base_width must be >= 1")
        if self.n_resblocks < 0:
            raise ConfigError("n_resblocks must be >= 0")
        if not 0 < self.width_factor <= 1:
            raise ConfigError("width_factor must lie in (0, 1]")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be >= 1")

    def stage_widths(self) -> tuple:
        """Channel widths of the three trunk stages, scaled by width_factor."""
        return tuple(math.ceil(self.width_factor * self.base_width * m) for m in (1, 2, 4))


@dataclass(frozen=True)
class DiscriminatorSpec:
    widths: tuple = (16, 32, 64, 128)
    in_channels: int = 3

    def __post_init__(self):
        if self.in_channels != 3:
            raise ConfigError("discriminator input channel count must be 3")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("discriminator widths must be positive")


@dataclass(frozen=True)
class FeatureExtractorSpec:
    widths: tuple = (8, 16, 32, 64)
    in_channels: int = 3

    def __post_init__(self):
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("extractor widths must be positive")


# ---------------------------------------------------------------------------
# Weight init (driven by numpy streams, never by torch's global RNG)


def _init_convs(module: nn.Module, rng: np.random.Generator, scheme: str = "gan"):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            if scheme == "gan":
                std = 0.02
            else:  # he: keeps activation scale through deep random-feature stacks
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                std = math.sqrt(2.0 / fan_in)
            w = rng.normal(0.0, std, size=tuple(m.weight.shape))
            with torch.no_grad():
                m.weight.copy_(torch.from_numpy(w))
                if m.bias is not None:
                    m.bias.zero_()


def _finish(module: nn.Module, dtype: torch.dtype) -> nn.Module:
    return module.to(torch.float64).to(dtype)


def _check_tap_list(taps, depth: int, what: str):
    taps = tuple(taps)
    if any(b <= a for a, b in zip(taps, taps[1:])):
        raise ConfigError(f"{what} taps must be strictly increasing, got {taps}")
    for t in taps:
        if not 0 <= t < depth:
            raise ConfigError(f"{what} tap {t} out of range (network has {depth} tappable layers)")
    return taps


# ---------------------------------------------------------------------------
# Generator: c7s1-w / two stride-2 downs / n residual blocks / two ups / c7s1-out


class ResBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
            nn.ReLU(),
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """Image-to-image generator with tap extraction over its block sequence.

    Tappable layers are the top-level blocks, indexed 0..n_blocks-1:
    stem, down1, down2, res_0..res_{n-1}, up1, up2, head.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        self.in_channels = spec.in_channels
        w0, w1, w2 = spec.stage_widths()
        blocks = [
            nn.Sequential(
                nn.ReflectionPad2d(3),
                nn.Conv2d(spec.in_channels, w0, 7),
                nn.InstanceNorm2d(w0),
                nn.ReLU(),
            ),
            nn.Sequential(nn.Conv2d(w0, w1, 3, 2, 1), nn.InstanceNorm2d(w1), nn.ReLU()),
            nn.Sequential(nn.Conv2d(w1, w2, 3, 2, 1), nn.InstanceNorm2d(w2), nn.ReLU()),
        ]
        blocks += [ResBlock(w2) for _ in range(spec.n_resblocks)]
        blocks += [
            nn.Sequential(
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                nn.Conv2d(w2, w1, 3, 1, 1),
                nn.InstanceNorm2d(w1),
                nn.ReLU(),
            ),
            nn.Sequential(
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                nn.Conv2d(w1, w0, 3, 1, 1),
                nn.InstanceNorm2d(w0),
                nn.ReLU(),
            ),
            nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(w0, spec.out_channels, 7), nn.Tanh()),
        ]
        self.blocks = nn.ModuleList(blocks)

    @property
    def n_blocks(self):
        return len(self.blocks)

    def res_block_indices(self):
        return tuple(range(3, 3 + self.spec.n_resblocks))

    def tap_channels(self, taps) -> tuple:
        """Channel count of each tapped block output."""
        w0, w1, w2 = self.spec.stage_widths()
        n = self.spec.n_resblocks
        per_block = [w0, w1, w2] + [w2] * n + [w1, w0, self.spec.out_channels]
        return tuple(per_block[t] for t in _check_tap_list(taps, self.n_blocks, "generator"))

    def forward_with_taps(self, x, taps):
        taps = _check_tap_list(taps, self.n_blocks, "generator")
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"generator expects (N, {self.spec.in_channels}, H, W), got {tuple(x.shape)}"
            )
        if x.shape[2] % 4 != 0 or x.shape[3] % 4 != 0:
            raise ShapeError(f"generator input H and W must be multiples of 4, got {tuple(x.shape[2:])}")
        feats = []
        want = set(taps)
        h = x
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i in want:
                feats.append(h)
        return h, feats

    def forward(self, x):
        out, _ = self.forward_with_taps(x, ())
        return out


def build_generator(spec: GeneratorSpec, rng: np.random.Generator, dtype=torch.float64):
    model = ResnetGenerator(spec).to(torch.float64)
    _init_convs(model, rng, scheme="gan")
    model = _finish(model, dtype)
    return model, ParameterSet.of_module(model)


def default_generator_taps(spec: GeneratorSpec) -> tuple:
    """Up to four evenly spaced taps across the residual trunk."""
    if spec.n_resblocks == 0:
        return (1, 2)
    first, last = 3, 3 + spec.n_resblocks - 1
    k = min(4, spec.n_resblocks)
    return tuple(sorted({int(round(v)) for v in np.linspace(first, last, k)}))


def generator_forward_with_taps(model: ResnetGenerator, x, taps):
    return model.forward_with_taps(x, taps)


# ---------------------------------------------------------------------------
# Patch discriminator: stride-2 conv blocks, 1-channel patch score head


class PatchDiscriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        self.in_channels = spec.in_channels
        blocks = []
        c = spec.in_channels
        for i, w in enumerate(spec.widths):
            layers = [nn.Conv2d(c, w, 4, 2, 1)]
            if i > 0:
                layers.append(nn.InstanceNorm2d(w))
            layers.append(nn.LeakyReLU(0.2))
            blocks.append(nn.Sequential(*layers))
            c = w
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(c, 1, 4, 1, 1)

    @property
    def n_blocks(self):
        return len(self.blocks)

    def forward_with_taps(self, img, taps):
        taps = _check_tap_list(taps, self.n_blocks, "discriminator")
        if img.shape[1] != self.spec.in_channels:
            raise ShapeError(f"discriminator expects {self.spec.in_channels}-channel input, got {img.shape[1]}")
        check_image_range(img, "discriminator input")
        min_hw = 2 ** (self.n_blocks + 1)
        if img.shape[2] < min_hw or img.shape[3] < min_hw:
            raise ShapeError(f"discriminator input must be at least {min_hw}x{min_hw}, got {tuple(img.shape[2:])}")
        feats = []
        want = set(taps)
        h = img
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i in want:
                feats.append(h)
        return self.head(h), feats

    def forward(self, img):
        scores, _ = self.forward_with_taps(img, ())
        return scores


def build_discriminator(spec: DiscriminatorSpec, rng: np.random.Generator, dtype=torch.float64):
    model = PatchDiscriminator(spec).to(torch.float64)
    _init_convs(model, rng, scheme="gan")
    model = _finish(model, dtype)
    return model, ParameterSet.of_module(model)


def default_discriminator_taps(spec: DiscriminatorSpec) -> tuple:
    return tuple(range(len(spec.widths)))


def discriminator_forward_with_taps(model: PatchDiscriminator, img, taps):
    return model.forward_with_taps(img, taps)


# ---------------------------------------------------------------------------
# Downsampler bank: per-tap 1x1 projection to a 3-channel feature-image


class DownsamplerBank(nn.Module):
    def __init__(self, channel_counts):
        super().__init__()
        self.channel_counts = tuple(channel_counts)
        self.convs = nn.ModuleList([nn.Conv2d(c, 3, 1) for c in self.channel_counts])

    def __len__(self):
        return len(self.convs)

    @property
    def frozen(self):
        return all(not p.requires_grad for p in self.parameters())

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def project(self, tap_index, feat):
        if not 0 <= tap_index < len(self.convs):
            raise ConfigError(f"bank has no entry for tap index {tap_index}")
        expect = self.channel_counts[tap_index]
        if feat.shape[1] != expect:
            raise ConfigError(
                f"bank entry {tap_index} expects {expect} channels, feature map has {feat.shape[1]}"
            )
        return torch.tanh(self.convs[tap_index](feat))


def build_downsampler_bank(channel_counts, rng: np.random.Generator, frozen: bool, dtype=torch.float64):
    bank = DownsamplerBank(channel_counts).to(torch.float64)
    _init_convs(bank, rng, scheme="gan")
    bank = _finish(bank, dtype)
    if frozen:
        bank.freeze()
    return bank


def downsample_to_image(bank: DownsamplerBank, tap_index, feat, target_hw):
    """Project a feature map to a 3-channel feature-image sized for the discriminator."""
    img = bank.project(tap_index, feat)
    th, tw = target_hw
    if img.shape[2] != th or img.shape[3] != tw:
        img = F.interpolate(img, size=(th, tw), mode="bilinear", align_corners=False)
    return img


class ChannelAdapterBank(nn.Module):
    """Per-tap 1x1 projections aligning student channel counts to the teacher's
    (the per-pixel feature-matching baseline needs them)."""

    def __init__(self, in_counts, out_counts):
        super().__init__()
        if len(in_counts) != len(out_counts):
            raise ConfigError("adapter bank needs matching in/out channel lists")
        self.in_counts = tuple(in_counts)
        self.out_counts = tuple(out_counts)
        self.convs = nn.ModuleList([nn.Conv2d(ci, co, 1) for ci, co in zip(in_counts, out_counts)])

    def project(self, tap_index, feat):
        if feat.shape[1] != self.in_counts[tap_index]:
            raise ConfigError(
                f"adapter entry {tap_index} expects {self.in_counts[tap_index]} channels, got {feat.shape[1]}"
            )
        return self.convs[tap_index](feat)


def build_channel_adapter(in_counts, out_counts, rng: np.random.Generator, dtype=torch.float64):
    bank = ChannelAdapterBank(in_counts, out_counts).to(torch.float64)
    _init_convs(bank, rng, scheme="gan")
    return _finish(bank, dtype)


# ---------------------------------------------------------------------------
# Fixed feature extractor (random or file-loaded weights, permanently frozen)


class FeatureExtractor(nn.Module):
    def __init__(self, spec: FeatureExtractorSpec):
        super().__init__()
        self.spec = spec
        self.in_channels = spec.in_channels
        blocks = []
        c = spec.in_channels
        for w in spec.widths:
            blocks.append(nn.Sequential(nn.Conv2d(c, w, 3, 2, 1), nn.LeakyReLU(0.2)))
            c = w
        self.blocks = nn.ModuleList(blocks)

    @property
    def n_blocks(self):
        return len(self.blocks)

    @property
    def out_dim(self):
        return self.spec.widths[-1]

    def forward_with_taps(self, img, taps):
        taps = _check_tap_list(taps, self.n_blocks, "extractor")
        if img.shape[1] != self.spec.in_channels:
            raise ShapeError(f"extractor expects {self.spec.in_channels}-channel input, got {img.shape[1]}")
        feats = []
        want = set(taps)
        h = img
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i in want:
                feats.append(h)
        return h, feats

    def forward(self, img):
        out, _ = self.forward_with_taps(img, ())
        return out


def build_feature_extractor(
    spec: FeatureExtractorSpec,
    rng: np.random.Generator = None,
    weights_dir=None,
    dtype=torch.float64,
):
    model = FeatureExtractor(spec).to(torch.float64)
    if weights_dir:
        assign_parameters(model, load_array_store(weights_dir))
    else:
        if rng is None:
            raise ConfigError("feature extractor needs either an rng or a weights directory")
        _init_convs(model, rng, scheme="he")
    model = _finish(model, dtype)
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def default_extractor_taps(spec: FeatureExtractorSpec) -> tuple:
    return tuple(range(len(spec.widths)))


def extractor_forward_with_taps(model: FeatureExtractor, img, taps):
    _, feats = model.forward_with_taps(img, taps)
    return feats


# ---------------------------------------------------------------------------
# Array store: one raw little-endian binary file per parameter path plus a
# plain-text manifest (path, shape, dtype, per-array digest, set digest).

_STORE_DTYPES = {"float32": "<f4", "float64": "<f8"}
_MANIFEST = "manifest.txt"


def save_array_store(dir_path, arrays, dtype: str = "float32") -> str:
    if dtype not in _STORE_DTYPES:
        raise ConfigError(f"store dtype must be one of {sorted(_STORE_DTYPES)}")
    np_dtype = _STORE_DTYPES[dtype]
    os.makedirs(os.path.join(dir_path, "arrays"), exist_ok=True)
    stored = {}
    lines = ["# slimgan array store v1"]
    for path in arrays:
        a = arrays[path]
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        cast = np.ascontiguousarray(np.asarray(a, dtype=np.float64)).astype(np_dtype)
        stored[path] = cast
        cast.tofile(os.path.join(dir_path, "arrays", path + ".bin"))
        shape = ",".join(str(s) for s in cast.shape)
        lines.append(f"{path}\t{shape}\t{dtype}\t{array_digest(cast)}")
    set_digest = parameter_digest(stored)
    lines.append(f"# set {set_digest}")
    with open(os.path.join(dir_path, _MANIFEST), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return set_digest


def read_manifest(dir_path):
    manifest_path = os.path.join(dir_path, _MANIFEST)
    if not os.path.exists(manifest_path):
        raise CorruptionError(f"missing manifest at {manifest_path}")
    entries, set_digest = {}, None
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# set "):
                set_digest = line[len("# set "):].strip()
                continue
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise CorruptionError(f"malformed manifest line: {line!r}")
            path, shape_s, dtype, digest = parts
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            entries[path] = (shape, dtype, digest)
    if set_digest is None:
        raise CorruptionError("manifest has no set digest")
    return entries, set_digest


def load_array_store(dir_path):
    """Load all arrays (as float64), verifying every recorded digest."""
    entries, set_digest = read_manifest(dir_path)
    out = {}
    for path, (shape, dtype, digest) in entries.items():
        if dtype not in _STORE_DTYPES:
            raise CorruptionError(f"{path}: unknown stored dtype {dtype!r}")
        fpath = os.path.join(dir_path, "arrays", path + ".bin")
        if not os.path.exists(fpath):
            raise CorruptionError(f"missing array file for {path}")
        a = np.fromfile(fpath, dtype=_STORE_DTYPES[dtype])
        try:
            a = a.reshape(shape)
        except ValueError:
            raise CorruptionError(f"{path}: file size does not match shape {shape}") from None
        if array_digest(a) != digest:
            raise CorruptionError(f"{path}: digest mismatch (corrupt or tampered file)")
        out[path] = a.astype(np.float64)
    if parameter_digest(out) != set_digest:
        raise CorruptionError("set digest mismatch")
    return out


def store_set_digest(dir_path) -> str:
    return read_manifest(dir_path)[1]


def assign_parameters(module: nn.Module, arrays, prefix: str = ""):
    """Copy stored arrays into a module's parameters (strict: all must match)."""
    params = dict(module.named_parameters())
    for name, p in params.items():
        key = prefix + name
        if key not in arrays:
            raise CorruptionError(f"store is missing parameter {key}")
        a = arrays[key]
        if tuple(a.shape) != tuple(p.shape):
            raise CorruptionError(f"{key}: stored shape {tuple(a.shape)} != model shape {tuple(p.shape)}")
        with torch.no_grad():
            p.copy_(torch.from_numpy(np.ascontiguousarray(a)).to(p.dtype))
    return module
