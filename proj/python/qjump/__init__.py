"""Quantum-jump unraveling of Lindblad dynamics (C++ core)."""

from ._qjump import (
    Config,
    ConfigError,
    DimensionError,
    Error,
    Generator,
    IntegrationError,
    Model,
    ModeUnsupportedError,
    NumericalError,
    StepSizeError,
    StructuralError,
    dissipation_rate,
    escape_probability,
    fnv1a,
    integrate_master,
    jump_spectrum,
    ks_statistic,
    run_cli,
    trace_distance,
    two_level,
)

__version__ = "0.3.0"


def load_model(path):
    """Model built from a config file."""
    return Model(Config.load(path))
