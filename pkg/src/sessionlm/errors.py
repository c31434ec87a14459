"""Exception types; ``category`` feeds the CLI's machine-parseable error line."""


class SessionLmError(Exception):
    category = "internal"


class ShapeError(SessionLmError):
    category = "shape"


class ConfigError(SessionLmError):
    category = "config"


class DataError(SessionLmError):
    category = "data"


class MissingArtifactError(SessionLmError):
    category = "missing-artifact"


class TrainingError(SessionLmError):
    category = "training"
