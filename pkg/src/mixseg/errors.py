"""Exception taxonomy shared across the package.

Everything user-facing derives from MixsegError so the CLI can map
failures onto its exit-code contract in one place.
"""


class MixsegError(Exception):
    pass


class InvalidShape(MixsegError):
    """A shape is structurally unusable (empty, non-positive dim, too small)."""


class ShapeMismatch(MixsegError):
    """Two operands disagree on shape where agreement is required."""


class NotScalar(MixsegError):
    """backward() was handed a tensor with more than one element."""


class GraphError(MixsegError):
    """backward() found no recorded graph reaching the loss."""


class DomainError(MixsegError):
    """Input is outside an op's mathematical domain (e.g. log of <= 0)."""


class NonFinite(MixsegError):
    """An op produced inf or nan where finiteness is guaranteed."""


class InvalidLambda(MixsegError):
    """Mixing coefficient outside (0, lambda_max]."""


class InvalidDistribution(MixsegError):
    """A per-pixel class distribution does not sum to 1 within tolerance."""


class EmptyPool(MixsegError):
    """Pair matching was asked to draw from an empty image pool."""


class InvalidIteration(MixsegError):
    """Iteration counter outside [0, max_iter]."""


class StateMismatch(MixsegError):
    """Optimizer state or checkpoint does not line up with model parameters."""


class FormatError(MixsegError):
    """A binary or text artifact failed to parse.

    Carries the byte offset at which parsing gave up, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(MixsegError):
    """Bad config file, unknown key, or malformed --set override."""


class DivergedError(MixsegError):
    """Training loss became non-finite."""
