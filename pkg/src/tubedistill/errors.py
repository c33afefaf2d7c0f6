"""Exception types shared across the package.

Exit-code mapping (see cli.main): ConfigurationError -> 2, NumericError -> 3,
OSError -> 4.
"""


class ConfigurationError(ValueError):
    """A config value or spec is invalid (bad range, unknown key, bad shape spec)."""


class ContractError(ValueError):
    """A caller violated an API precondition (shape mismatch, labeled data where
    unlabeled is required, mismatched modalities)."""


class EpisodeSamplingError(ValueError):
    """The sample pool cannot support the requested N-way K-shot episode."""


class NumericError(RuntimeError):
    """A non-finite value surfaced where finite math was required."""
