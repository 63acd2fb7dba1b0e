"""Exception hierarchy shared by all tfilter modules."""


class TfilterError(Exception):
    """Base class for every error raised by the library."""


class PartitionError(TfilterError, ValueError):
    """Invalid domain, grid counts, or partition mismatch."""


class DimensionMismatchError(TfilterError, ValueError):
    pass


class ConfigError(TfilterError, ValueError):
    """Experiment configuration failed validation."""


class NumericalError(TfilterError, ArithmeticError):
    """Base class for failures of a numerical stage (CLI exit code 3)."""


class DivergenceError(NumericalError):
    pass


class EmptyRowError(NumericalError):
    """An Ulam row received no in-domain landings."""

    def __init__(self, box: int, discarded: int):
        super().__init__(
            f"box {box}: all {discarded} flow samples left the domain; "
            "enlarge the domain or use out_of_domain='absorb'"
        )
        self.box = box
        self.discarded = discarded


class MatrixHeaderError(TfilterError, ValueError):
    pass


class DefectiveMatrixError(NumericalError):
    def __init__(self, condition: float, threshold: float):
        super().__init__(
            f"eigenvector matrix is numerically defective: condition number "
            f"{condition:.3e} exceeds {threshold:.1e}"
        )
        self.condition = condition


class ReducibleChainError(NumericalError):
    def __init__(self, components):
        self.components = [list(map(int, c)) for c in components]
        sizes = [len(c) for c in self.components]
        super().__init__(f"chain is reducible: {len(sizes)} closed classes of sizes {sizes}")


class DetailedBalanceError(NumericalError):
    def __init__(self, violation: float, eps: float):
        super().__init__(
            f"detailed balance violated by {violation:.3e} (> {eps:.1e}); "
            "use eigendecompose for the general complex spectrum"
        )
        self.violation = violation


class WeightCollapseError(NumericalError):
    pass


class AcceptanceRejectionError(NumericalError):
    pass
