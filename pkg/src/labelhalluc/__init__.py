"""Few-shot transfer by pseudo-labelling base data with the novel classifier."""
from .errors import (ConfigError, ContractViolation, DataError, DimensionError,
                     LabelHallucError, NumericError, TrainingError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractViolation", "DataError", "DimensionError",
           "LabelHallucError", "NumericError", "TrainingError", "__version__"]
