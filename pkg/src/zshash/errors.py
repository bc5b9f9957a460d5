"""Exception hierarchy shared by all zshash modules.

The CLI maps these onto fixed exit codes: LoadError/ValidationError -> 2,
SolverError -> 3, ProtocolError -> 4.
"""


class ZshashError(Exception):
    """Base class for all zshash errors."""


class LoadError(ZshashError):
    """A file could not be parsed: bad magic, ragged rows, non-finite
    values, duplicate tokens, truncation. The message names the offending
    row or field."""


class ValidationError(ZshashError):
    """Arguments violate an operation's contract (dimension mismatch,
    out-of-range hyperparameter, missing label, ...)."""


class SolverError(ZshashError):
    """A linear-algebra subproblem failed (singular system, non-finite
    objective)."""


class ProtocolError(ZshashError):
    """The seen/unseen split contract is violated (training item carries
    an unseen label, empty unseen set, ...)."""
