"""Exception hierarchy shared by all dddm modules."""


class DDDMError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(DDDMError, ValueError):
    """An argument is outside its documented domain."""


class BuildError(DDDMError, ValueError):
    """A likelihood table cannot be built from the supplied predictions."""


class DegenerateEvidenceError(DDDMError, ArithmeticError):
    """Every hypothesis assigns zero likelihood to an observation."""


class DivergenceError(DDDMError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class IdxParseError(DDDMError, ValueError):
    """Base class for malformed IDX files."""


class BadMagicError(IdxParseError):
    pass


class TruncatedFileError(IdxParseError):
    pass


class CountMismatchError(IdxParseError):
    pass


class ConfigError(DDDMError, ValueError):
    """An experiment or CLI configuration is invalid."""
