"""Exception types shared across the package.

All inherit from ``FusedKvError`` so callers can catch the whole family;
each also inherits the closest builtin (``ValueError`` / ``IndexError``)
so idiomatic ``except ValueError`` code keeps working.
"""


class FusedKvError(Exception):
    """Base class for all fusedkv errors."""


class DimensionError(FusedKvError, ValueError):
    """Shape or length mismatch between operands."""


class DegenerateInputError(FusedKvError, ValueError):
    """Input is mathematically degenerate (e.g. zero-norm vector)."""


class NumericError(FusedKvError, ValueError):
    """Non-finite input or a value outside the representable range."""


class BoundsError(FusedKvError, IndexError):
    """Index outside the valid range of a container."""


class EmptyCacheError(FusedKvError, ValueError):
    """Attention or reduction requested over zero stored positions."""


class ConfigError(FusedKvError, ValueError):
    """Invalid configuration value or combination."""


class InfeasibleError(FusedKvError, ValueError):
    """A planning query has no feasible answer under the given budget."""
