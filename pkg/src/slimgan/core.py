"""Shared domain types, run configuration, deterministic RNG and parameter bookkeeping.

Images and feature maps travel through the package as rank-4 arrays
(batch, channels, height, width).  Entries must be finite everywhere and lie
in [-1, 1] whenever the array is an image or a projected feature-image that a
discriminator will consume; raw intermediate feature maps are unconstrained.
"""

from __future__ import annotations

import dataclasses
import hashlib
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
import torch


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, bad value, inconsistent setup)."""


class ShapeError(ValueError):
    """Array shape violates an operation's contract."""


class ValidationError(ValueError):
    """Array content violates an invariant (range, finiteness)."""


class DataError(RuntimeError):
    """Dataset ingestion failure (unreadable or malformed input)."""


class CorruptionError(RuntimeError):
    """Stored arrays do not match their recorded digests."""


class DivergenceError(RuntimeError):
    """A training loss became non-finite; carries the offending term's name."""

    def __init__(self, term, value=None):
        self.term = term
        super().__init__(f"non-finite loss term '{term}'" + (f" (value={value})" if value is not None else ""))


class UnsupportedLayerError(ValueError):
    """Complexity counting met a layer type it has no formula for."""


GAN_VARIANTS = ("vanilla", "nonsaturating", "least_squares")
DISTANCE_VARIANTS = ("l1", "l2")
TASKS = ("paired_edges2blobs", "unpaired_palette_shift", "folder")
LOSS_TERMS = ("per", "dcd", "gan")
DTYPES = ("float64", "float32")


# ---------------------------------------------------------------------------
# Deterministic randomness


def seeded_rng(seed: int, purpose: str = "root") -> np.random.Generator:
    """Return a deterministic generator for (seed, purpose).

    Distinct purposes ("data", "init/teacher_gen", "shuffle/3", ...) yield
    independent streams; the same pair always yields the same stream.
    """
    tag = int.from_bytes(hashlib.sha256(purpose.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


# ---------------------------------------------------------------------------
# Content digests
#
# All digests hash the canonical little-endian float64 serialization of the
# array values, so the digest is independent of the in-memory dtype or layout.


def _as_numpy(arr) -> np.ndarray:
    if isinstance(arr, torch.Tensor):
        return arr.detach().cpu().numpy()
    return np.asarray(arr)


def array_digest(arr) -> str:
    a = _as_numpy(arr)
    if not np.all(np.isfinite(a)):
        raise ValidationError("non-finite parameter")
    canon = np.ascontiguousarray(a, dtype="<f8")
    h = hashlib.sha256()
    h.update(str(a.shape).encode())
    h.update(canon.tobytes())
    return h.hexdigest()


def parameter_digest(params) -> str:
    """Stable content hash of a named parameter collection.

    Identical values give identical digests; any single-element change gives
    a different digest with overwhelming probability.  Paths are hashed in
    sorted order so the digest does not depend on insertion order.
    """
    if isinstance(params, ParameterSet):
        items = params.items()
    elif isinstance(params, Mapping):
        items = params.items()
    else:
        raise TypeError(f"expected ParameterSet or mapping, got {type(params)!r}")
    h = hashlib.sha256()
    for path, arr in sorted(items):
        h.update(path.encode("utf-8"))
        h.update(b"\x00")
        h.update(array_digest(arr).encode())
    return h.hexdigest()


class ParameterSet(Mapping):
    """Ordered view of named parameters (path -> tensor).

    A parameter is frozen when its tensor does not require grad; frozen
    parameters receive no optimizer updates and expose zero gradients.
    """

    def __init__(self, named):
        self._params = dict(named)

    @classmethod
    def of_module(cls, module: torch.nn.Module, prefix: str = "") -> "ParameterSet":
        return cls(dict(module.named_parameters(prefix=prefix)))

    def __getitem__(self, path):
        return self._params[path]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def digest(self) -> str:
        return parameter_digest(self)

    def frozen_paths(self):
        return [p for p, t in self._params.items() if isinstance(t, torch.Tensor) and not t.requires_grad]

    def grad(self, path) -> torch.Tensor:
        """Accumulated gradient for a parameter; exactly zero for frozen ones."""
        t = self._params[path]
        if t.grad is None:
            return torch.zeros_like(t)
        return t.grad


# ---------------------------------------------------------------------------
# Array range checks


def check_image_range(x, name: str = "image", tol: float = 1e-9):
    """Validate the image-batch contract: finite, 4-D, entries in [-1, 1]."""
    a = x.detach() if isinstance(x, torch.Tensor) else np.asarray(x)
    if a.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 (N, C, H, W), got shape {tuple(a.shape)}")
    if isinstance(a, torch.Tensor):
        finite = bool(torch.isfinite(a).all())
        peak = float(a.abs().max()) if a.numel() else 0.0
    else:
        finite = bool(np.isfinite(a).all())
        peak = float(np.abs(a).max()) if a.size else 0.0
    if not finite:
        raise ValidationError(f"{name}: non-finite entries")
    if peak > 1.0 + tol:
        raise ValidationError(f"{name}: entries outside [-1, 1] (max abs {peak:.6g})")


# ---------------------------------------------------------------------------
# Tap specification


@dataclass(frozen=True)
class TapSpec:
    """Layer-index sets selecting intermediate activations of the generator,
    the discriminator and the feature extractor."""

    generator_taps: tuple
    discriminator_taps: tuple
    extractor_taps: tuple

    def __post_init__(self):
        for fname in ("generator_taps", "discriminator_taps", "extractor_taps"):
            taps = tuple(getattr(self, fname))
            object.__setattr__(self, fname, taps)
            if len(taps) == 0:
                raise ConfigError(f"{fname} must be non-empty")
            if any(b <= a for a, b in zip(taps, taps[1:])):
                raise ConfigError(f"{fname} must be strictly increasing, got {taps}")
            if any(t < 0 for t in taps):
                raise ConfigError(f"{fname} entries must be >= 0, got {taps}")


def check_taps_in_range(taps, depth: int, what: str):
    for t in taps:
        if not 0 <= t < depth:
            raise ConfigError(f"{what} tap {t} out of range for depth {depth}")


# ---------------------------------------------------------------------------
# Hyper-parameters


@dataclass
class HyperParams:
    lambda_dcd: float = 1.0
    lambda_fea: float = 10.0
    lambda_sty: float = 1e4
    lambda_stu: float = 1.0
    lr_initial: float = 2e-4
    epochs: int = 8
    batch_size: int = 4
    gan_variant: str = "nonsaturating"
    distance_variant: str = "l1"

    def validate(self):
        for name in ("lambda_dcd", "lambda_fea", "lambda_sty", "lambda_stu"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr_initial <= 0:
            raise ConfigError("lr_initial must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.gan_variant not in GAN_VARIANTS:
            raise ConfigError(f"gan_variant must be one of {GAN_VARIANTS}")
        if self.distance_variant not in DISTANCE_VARIANTS:
            raise ConfigError(f"distance_variant must be one of {DISTANCE_VARIANTS}")
        return self


# ---------------------------------------------------------------------------
# Run configuration
#
# The on-disk format is a plain-text key=value file ('#' starts a comment).
# Every key below is valid; anything else is a hard error.


@dataclass
class RunConfig:
    # run identity
    seed: int = 0
    dtype: str = "float64"
    # loss weights and schedule
    lambda_dcd: float = 1.0
    lambda_fea: float = 10.0
    lambda_sty: float = 1e4
    lambda_stu: float = 1.0
    lambda_fitnet: float = 0.0
    lr_initial: float = 2e-4
    epochs: int = 8
    batch_size: int = 4
    gan_variant: str = "nonsaturating"
    distance_variant: str = "l1"
    loss_set: str = "per,dcd,gan"
    # architecture
    base_width: int = 16
    n_resblocks: int = 6
    width_factor: float = 0.25
    in_channels: int = 3
    out_channels: int = 3
    disc_widths: tuple = (16, 32, 64, 128)
    extractor_widths: tuple = (8, 16, 32, 64)
    extractor_seed: int = 101
    extractor_weights: str = ""
    embedder_widths: tuple = (8, 16, 32, 64)
    embedder_seed: int = 77
    # taps; empty tuple means "use the network's default taps"
    generator_taps: tuple = ()
    discriminator_taps: tuple = ()
    extractor_taps: tuple = ()
    # data
    task: str = "paired_edges2blobs"
    data_dir: str = ""
    paired: bool = True
    resolution: int = 64
    n_train: int = 256
    n_eval: int = 64
    # training-loop plumbing
    eval_interval: int = 200
    checkpoint_interval: int = 200
    teacher_checkpoint: str = ""
    teacher_update: str = "combined"
    distill_teacher_grad: bool = False
    dump_features: bool = False

    def hyper(self) -> HyperParams:
        return HyperParams(
            lambda_dcd=self.lambda_dcd,
            lambda_fea=self.lambda_fea,
            lambda_sty=self.lambda_sty,
            lambda_stu=self.lambda_stu,
            lr_initial=self.lr_initial,
            epochs=self.epochs,
            batch_size=self.batch_size,
            gan_variant=self.gan_variant,
            distance_variant=self.distance_variant,
        )

    def loss_terms(self) -> set:
        if not self.loss_set.strip():
            raise ConfigError("loss_set must name at least one of per,dcd,gan")
        terms = {t.strip() for t in self.loss_set.split(",") if t.strip()}
        bad = terms - set(LOSS_TERMS)
        if bad:
            raise ConfigError(f"unknown loss_set terms {sorted(bad)}; valid: {LOSS_TERMS}")
        return terms

    def effective(self) -> "RunConfig":
        """Apply the loss_set switches to the lambda weights."""
        cfg = dataclasses.replace(self)
        terms = self.loss_terms()
        if "per" not in terms:
            cfg.lambda_fea = 0.0
            cfg.lambda_sty = 0.0
        if "dcd" not in terms:
            cfg.lambda_dcd = 0.0
        if "gan" not in terms:
            cfg.lambda_stu = 0.0
        return cfg

    def validate(self) -> "RunConfig":
        self.hyper().validate()
        self.loss_terms()
        if self.lambda_fitnet < 0:
            raise ConfigError("lambda_fitnet must be >= 0")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {DTYPES}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; valid tasks: {', '.join(TASKS)}")
        if self.task == "folder" and not self.data_dir:
            raise ConfigError("task=folder requires data_dir")
        if self.resolution % 4 != 0 or self.resolution <= 0:
            raise ConfigError("resolution must be a positive multiple of 4")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("n_train and n_eval must be >= 1")
        if not 0 < self.width_factor <= 1:
            raise ConfigError("width_factor must lie in (0, 1]")
        if self.base_width < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.n_resblocks < 0:
            raise ConfigError("n_resblocks must be >= 0")
        if not self.disc_widths or any(w < 1 for w in self.disc_widths):
            raise ConfigError("disc_widths must be positive")
        if not self.extractor_widths or any(w < 1 for w in self.extractor_widths):
            raise ConfigError("extractor_widths must be positive")
        if not self.embedder_widths or any(w < 1 for w in self.embedder_widths):
            raise ConfigError("embedder_widths must be positive")
        if self.teacher_update not in ("combined", "sequential"):
            raise ConfigError("teacher_update must be 'combined' or 'sequential'")
        if self.eval_interval < 1 or self.checkpoint_interval < 1:
            raise ConfigError("eval_interval and checkpoint_interval must be >= 1")
        return self

    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    f = _CONFIG_FIELDS[name]
    raw = raw.strip()
    default = f.default if f.default is not dataclasses.MISSING else None
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {raw!r}") from None
    if isinstance(default, tuple):
        if raw == "":
            return ()
        try:
            return tuple(int(x.strip()) for x in raw.split(","))
        except ValueError:
            raise ConfigError(f"{name}: expected comma-separated integers, got {raw!r}") from None
    return raw


def apply_setting(cfg: RunConfig, key: str, raw: str) -> RunConfig:
    key = key.strip()
    if key not in _CONFIG_FIELDS:
        raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(_CONFIG_FIELDS))}")
    setattr(cfg, key, _coerce(key, raw))
    return cfg


def parse_config_text(text: str, base: RunConfig = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        try:
            apply_setting(cfg, key, raw)
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    return cfg


def load_config(path, base: RunConfig = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base=base)
