"""Exception types.  Each carries a short machine-parsable ``category``."""


class AVInpaintError(Exception):
    category = "error"


class InvalidInputError(AVInpaintError, ValueError):
    category = "invalid-input"


class GenerationError(AVInpaintError, RuntimeError):
    category = "generation"


class ConfigError(AVInpaintError, ValueError):
    category = "config"


class DivergenceError(AVInpaintError, FloatingPointError):
    category = "divergence"


class FrozenError(AVInpaintError, RuntimeError):
    category = "frozen"


class CheckpointError(AVInpaintError, ValueError):
    category = "checkpoint"
