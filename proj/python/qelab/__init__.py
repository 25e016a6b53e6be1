"""Quality-estimation compression lab."""

from ._qelab import (
    ChecksumError,
    ConfigError,
    DataError,
    DimensionError,
    Error,
    FormatError,
    Model,
    ModeError,
    NumericError,
    SentencePair,
    Splits,
    UsageError,
    default_config,
    expected_param_counts,
    f1,
    load,
    load_tsv,
    pearson,
    synthesize,
    train,
)

__all__ = [
    "ChecksumError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "Error",
    "FormatError",
    "Model",
    "ModeError",
    "NumericError",
    "SentencePair",
    "Splits",
    "UsageError",
    "default_config",
    "expected_param_counts",
    "f1",
    "load",
    "load_tsv",
    "pearson",
    "synthesize",
    "train",
]
