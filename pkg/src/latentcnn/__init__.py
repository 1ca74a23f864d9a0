"""Latent SVM, region-latent CNN training and root/part ensembles in numpy."""
from .errors import (ConfigError, DataError, LatentCnnError, NumericError, UsageError,
                     VersionError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "LatentCnnError", "NumericError", "UsageError", "VersionError",
           "__version__"]
