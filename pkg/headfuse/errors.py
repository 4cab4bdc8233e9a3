"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class HeadFuseError(Exception):
  exit_code = 1


class ValidationError(HeadFuseError, ValueError):
  """Inputs violate a precondition: shapes, topology, names, config."""
  exit_code = 2


class NumericalError(HeadFuseError, ArithmeticError):
  """A computation cannot produce a trustworthy result."""
  exit_code = 3


class StorageError(HeadFuseError, OSError):
  """Reading or writing a file failed, or its content is malformed."""
  exit_code = 4


class StageError(HeadFuseError):
  """Wraps the failure of one pipeline stage."""

  def __init__(self, stage: str, cause: Exception):
    super().__init__(f'[{stage}] {cause}')
    self.stage = stage
    self.cause = cause

  @property
  def exit_code(self):
    return getattr(self.cause, 'exit_code', 1)


# Exit code of failures outside the hierarchy (sysexits EX_SOFTWARE).
INTERNAL_EXIT_CODE = 70
