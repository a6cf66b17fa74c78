"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific type that applies rather than bare ValueError.
"""


class EpdlabError(Exception):
    """Base class for package errors."""


class ConfigError(EpdlabError):
    """Invalid configuration: bad flag values, malformed model files,
    unsupported option combinations. CLI exit code 2."""


class InvariantError(EpdlabError):
    """A checkpoint, policy, or parameter set violates a structural
    invariant (simplex, squash range, schema). CLI exit code 3."""


class DivergenceError(EpdlabError):
    """Numerical divergence: a non-finite state appeared during
    integration. CLI exit code 4."""

    def __init__(self, message: str, step_index: int | None = None, t: float | None = None):
        super().__init__(message)
        self.step_index = step_index
        self.t = t
