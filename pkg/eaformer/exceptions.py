"""
EAFormer exception hierarchy
所有库内异常的统一基类，CLI 据此映射退出码
"""


class EAFError(Exception):
    """Base class for every error raised by the eaformer package."""


# === Tensor / autodiff ===
class ShapeError(EAFError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(EAFError, ValueError):
    """An operation was applied outside its mathematical domain (e.g. log of <= 0)."""


class NonFiniteError(EAFError, FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(EAFError, RuntimeError):
    """Misuse of a gradient tape (reuse, non-scalar loss, missing tape)."""


# === Geometry / fields ===
class ProjectionError(EAFError):
    """A point projects to infinity (camera-frame depth ~ 0)."""


class DegenerateLineError(EAFError):
    """A distance was requested against a degenerate epipolar line."""


class InvisibleCellError(EAFError):
    """A BEV cell lies behind the camera."""


# === Synthetic world ===
class PlacementError(EAFError):
    """Box placement failed after the maximum number of rejection tries."""


# === Configuration / IO ===
class ConfigError(EAFError, ValueError):
    """Invalid or unknown run configuration key."""


class RigValidationError(EAFError, ValueError):
    """Rig file violates its schema or physical constraints."""


class CheckpointError(EAFError):
    """Checkpoint blob is corrupt or does not match the model."""


# === Training ===
class DivergenceError(EAFError, ArithmeticError):
    """Training loss became non-finite."""
