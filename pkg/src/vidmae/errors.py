"""Exception taxonomy shared across the package.

Every error carries a short machine-readable ``slug`` so the CLI can
emit a single parseable cause line on failure.
"""


class VidmaeError(Exception):
    slug = "error"


class DimensionError(VidmaeError, ValueError):
    """Tensor shapes or index lists do not line up."""

    slug = "dimension-error"


class ConfigError(VidmaeError, ValueError):
    """Invalid geometry, hyperparameter, or configuration key."""

    slug = "config-error"


class ContractError(VidmaeError, RuntimeError):
    """A call violated an API precondition."""

    slug = "contract-error"


class FormatError(VidmaeError, ValueError):
    """A file does not match its on-disk format."""

    slug = "format-error"


class CheckpointError(VidmaeError, RuntimeError):
    """A checkpoint is incompatible with the current model."""

    slug = "checkpoint-error"


class CheckpointNotFound(CheckpointError):
    slug = "checkpoint-not-found"


class NumericsError(VidmaeError, FloatingPointError):
    """A computation produced NaN or Inf."""

    slug = "numerics-error"
