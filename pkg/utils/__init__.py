"""
Utils Package - Utility modules for the Neural Plasticity Network runner
"""

__version__ = "1.0.0"
__description__ = "Logging, error types and array preparation"

from .data_processor import DataProcessor
from .errors import (ConfigurationError, NPNError, NumericFailure, ParseError, UsageError,
                     EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK)
