"""Desk-scale GAN compression with discriminator-cooperated feature distillation."""

from .core import (
    ConfigError,
    CorruptionError,
    DataError,
    DivergenceError,
    HyperParams,
    ParameterSet,
    RunConfig,
    ShapeError,
    TapSpec,
    UnsupportedLayerError,
    ValidationError,
    parameter_digest,
    seeded_rng,
)

__version__ = "0.1.0"
