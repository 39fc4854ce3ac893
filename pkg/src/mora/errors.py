"""Exception hierarchy shared across the library and the CLI.

The CLI maps these onto process exit codes, so the split matters:
configuration problems (2), file and format problems (3), violated
runtime contracts (4).
"""


class MoraError(Exception):
    """Base class for all library errors."""


class ConfigError(MoraError, ValueError):
    """A parameter or configuration value is out of its documented domain."""


class IOFormatError(MoraError):
    """A file is missing, unreadable, or does not match its schema."""


class ContractViolation(MoraError):
    """An internal invariant or caller precondition was broken."""


class DivergenceError(ContractViolation):
    """A computation produced non-finite values."""


class CleanMisclassifiedError(ContractViolation):
    """The input is already misclassified, so there is nothing to attack.

    Callers evaluating robustness should catch this and count the sample
    as an error rather than as an attack success or failure.
    """
