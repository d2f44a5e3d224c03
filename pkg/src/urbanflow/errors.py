"""Exception hierarchy shared by every pipeline stage."""


class UrbanflowError(Exception):
    """Base class for all errors raised by this package."""


class MalformedRow(UrbanflowError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class DanglingEdge(UrbanflowError):
    pass


class DuplicateNodeId(UrbanflowError):
    pass


class Unreachable(UrbanflowError):
    def __init__(self, src, dst):
        self.src = src
        self.dst = dst
        super().__init__(f"no directed path from {src} to {dst}")


class Discarded(UrbanflowError):
    """A trip could not be turned into a node sequence."""

    NO_NODES_IN_RANGE = "NoNodesInRange"
    TOO_SHORT = "TooShort"
    UNREACHABLE_GAP = "UnreachableGap"

    def __init__(self, reason, detail=""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


class EmptyVocabulary(UrbanflowError):
    pass


class MissingVector(UrbanflowError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class NumericalDivergence(UrbanflowError):
    pass


class ZeroVector(UrbanflowError, ValueError):
    pass


class NoConvergence(UrbanflowError):
    def __init__(self, max_iter, residual):
        self.max_iter = max_iter
        self.residual = residual
        super().__init__(f"power iteration did not converge in {max_iter} iterations (residual {residual:.3e})")


class UndefinedIndex(UrbanflowError, ValueError):
    pass


class EmptyRegion(UrbanflowError, ValueError):
    pass


class UnknownNode(UrbanflowError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class EmptyBBox(UrbanflowError, ValueError):
    pass


class MissingInput(UrbanflowError):
    pass
