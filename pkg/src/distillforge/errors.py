"""Exception hierarchy for distillforge.

Every error raised on purpose inherits from :class:`DistillForgeError`, so
callers (and the CLI) can separate usage/configuration problems from runtime
failures.
"""


class DistillForgeError(Exception):
    """Base class for all distillforge errors."""


class ConfigurationError(DistillForgeError, ValueError):
    """A parameter or config value is outside its documented range."""


class DimensionError(DistillForgeError, ValueError):
    """Tensor shapes passed to an operation do not agree."""


class OracleError(DistillForgeError):
    """A denoiser oracle was asked for something it cannot answer."""


class TrainingError(DistillForgeError, RuntimeError):
    """An optimization loop produced a non-finite or otherwise fatal state."""


class GeometryError(DistillForgeError, RuntimeError):
    """Mesh extraction or field state is not usable for the requested step."""


class SequencingError(DistillForgeError, RuntimeError):
    """Pipeline stages were invoked out of their required order."""


class CheckpointError(DistillForgeError, RuntimeError):
    """A checkpoint file is missing, corrupt, or from an incompatible version."""


class ProtocolError(DistillForgeError, RuntimeError):
    """Remote-oracle wire protocol violation (framing, version, status)."""
