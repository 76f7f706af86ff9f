"""
Exceptions raised by the library.

Two families matter to callers: `InputError` (bad data or configuration, the
CLI exits with 2) and `NumericalError` (a fit or solver failed, the CLI exits
with 3).
"""

from __future__ import annotations

from typing import Optional


class ViewCouplingError(Exception):
    exit_code = 1


class InputError(ViewCouplingError):
    exit_code = 2


class NumericalError(ViewCouplingError):
    exit_code = 3


class NonFiniteInput(InputError):
    pass


class RowMismatch(InputError):
    def __init__(self, n1: int, n2: int):
        super().__init__(f"Views have different row counts ({n1} vs {n2}) and no ID columns to join on")
        self.n1 = n1
        self.n2 = n2


class NonNumericCell(InputError):
    def __init__(self, path: str, row: int, column: str, value: object):
        # row is 1-based over data lines (the header is line 0).
        super().__init__(f"{path}: non-numeric value {value!r} at row {row}, column '{column}'")
        self.path = path
        self.row = row
        self.column = column
        self.value = value


class MissingValues(InputError):
    pass


class EmptyAfterJoin(InputError):
    pass


class MarginMismatch(InputError):
    pass


class ConfigError(InputError):
    pass


class DegenerateCluster(NumericalError):
    def __init__(self, message: str, component: Optional[int] = None):
        super().__init__(message)
        self.component = component


class AllFitsFailed(NumericalError):
    pass


class NotConverged(NumericalError):
    def __init__(self, max_iter: int, residual: float):
        super().__init__(f"Sinkhorn balancing did not converge in {max_iter} iterations (residual={residual:.3e})")
        self.max_iter = max_iter
        self.residual = residual


class InfeasibleSupport(NumericalError):
    pass


class StepTooLarge(NumericalError):
    def __init__(self, step_size: float):
        super().__init__(f"Exponentiated gradient did not ascend with step size {step_size:.6g}")
        self.step_size = step_size


class NonFinite(NumericalError):
    pass


class ZeroMatrix(NumericalError):
    pass


class EmptyMarginal(NumericalError):
    pass
