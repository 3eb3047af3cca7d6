"""Exception hierarchy. Every error carries a stable ``code`` string."""


class ProtoPromptError(Exception):
    code = "error"


class ShapeError(ProtoPromptError, ValueError):
    code = "shape-error"


class NumericError(ProtoPromptError, FloatingPointError):
    code = "numeric-error"


class ClassError(ProtoPromptError, IndexError):
    code = "class-error"


class ConfigError(ProtoPromptError, ValueError):
    code = "config-error"


class EmptyMaskError(ProtoPromptError, ValueError):
    code = "empty-mask"


class FormatError(ProtoPromptError, ValueError):
    code = "format-error"


class DataIOError(ProtoPromptError, OSError):
    code = "io-error"


class PlacementError(ProtoPromptError, RuntimeError):
    code = "placement-error"


class MissingClassError(ProtoPromptError, ValueError):
    code = "missing-class-error"


class NondeterminismError(ProtoPromptError, RuntimeError):
    code = "nondeterminism-error"
