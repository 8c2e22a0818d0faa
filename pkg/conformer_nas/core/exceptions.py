"""Custom exceptions for the search engine"""

from typing import Any, Dict, Iterable, Optional, Sequence


class NasError(Exception):
    """Base class for every error raised by the package"""
    pass


class DimensionError(NasError, ValueError):
    """Raised when tensor shapes are incompatible"""

    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = [tuple(s) for s in shapes]


class ConfigurationError(NasError, ValueError):
    """Raised when configuration is invalid"""
    pass


class GenotypeError(NasError, ValueError):
    """Raised when a genotype or candidate operation name is invalid"""

    def __init__(self, message: str, valid_names: Optional[Iterable[str]] = None):
        self.valid_names = list(valid_names or [])
        if self.valid_names:
            message = f"{message} (valid names: {', '.join(self.valid_names)})"
        super().__init__(message)


class InfeasibleAlignmentError(NasError, ValueError):
    """Raised when a label sequence cannot be aligned to the available frames"""
    pass


class SearchSpaceOverflowError(NasError, OverflowError):
    """Raised when the architecture count exceeds the representable range"""
    pass


class DivergenceError(NasError):
    """Raised when training produces a non-finite loss"""

    def __init__(
        self,
        message: str,
        step: int,
        diagnostics: Optional[Dict[str, Any]] = None,
        last_good_checkpoint: Optional[str] = None,
    ):
        super().__init__(f"{message} (step {step})")
        self.step = step
        self.diagnostics = diagnostics or {}
        self.last_good_checkpoint = last_good_checkpoint


class ArtifactError(NasError, OSError):
    """Raised when reading or writing an artifact fails"""
    pass
