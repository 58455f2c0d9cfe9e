"""Exception hierarchy shared by every module.

Each error class carries the CLI exit code it maps to, so the command-line
front end can translate failures without a lookup table.
"""


class RBMRError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(RBMRError, ValueError):
    """Bad user configuration: missing columns, invalid flags, infeasible settings."""

    exit_code = 1


class EmptyInputError(RBMRError, ValueError):
    """No usable rows or SNPs remain after loading or harmonization."""

    exit_code = 2


class EmptySelectionError(EmptyInputError):
    """No SNP passes the instrument-selection threshold."""


class NumericalError(RBMRError, ArithmeticError):
    """Non-finite intermediate or failed factorization.

    Parameters
    ----------
    message : str
    snp_index : int, optional
        Position of the offending SNP when one can be named.
    """

    exit_code = 3

    def __init__(self, message, snp_index=None):
        if snp_index is not None:
            message = f"{message} (SNP index {snp_index})"
        super().__init__(message)
        self.snp_index = snp_index


class DegenerateError(NumericalError):
    """A degenerate column, state or design makes the requested quantity undefined."""


class DomainError(RBMRError, ValueError):
    """Argument outside the mathematical domain of a function."""

    exit_code = 3
