"""semcal: semantic-similarity calibration and confidence-guided
decoding for captioning model artifacts."""

from .errors import NumericError, SemcalError, ValidationError

__version__ = "0.1.0"

__all__ = ["SemcalError", "ValidationError", "NumericError", "__version__"]
