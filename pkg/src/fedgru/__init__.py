"""Federated GRU traffic-flow forecasting: data pipeline, a from-scratch GRU
with exact BPTT, a federated training simulator with a participant-sampling
round protocol, and location-clustered ensembles."""

from .errors import ConfigError, DataError, FedGruError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "FedGruError", "NumericError", "__version__"]
