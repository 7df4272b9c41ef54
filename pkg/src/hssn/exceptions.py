"""Exception hierarchy shared by every stage of the pipeline."""


class HSSNError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HSSNError, ValueError):
    """Tensor shapes do not agree with what an operation needs."""


class DegenerateBatchError(HSSNError, ValueError):
    """Train-mode batch normalization was handed fewer than two samples."""


class ContractError(HSSNError, ValueError):
    """A caller broke an operation's precondition (non-scalar loss, missing gradient, ...)."""


class ConfigurationError(HSSNError, ValueError):
    """An invalid model, loss, training or CLI configuration."""


class ValidationError(HSSNError, ValueError):
    """Data failed a structural invariant (manifest, pair sets, folds)."""


class ManifestParseError(ValidationError):
    def __init__(self, path, line_no, reason):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no


class InsufficientDataError(HSSNError, ValueError):
    """Not enough outfits to form triplets or folds."""


class NumericalError(HSSNError, FloatingPointError):
    """Training produced a non-finite loss."""


class UnknownItemError(HSSNError, KeyError):
    """An item id is not present in the embeddings or manifest."""
