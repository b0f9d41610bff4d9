"""Asynchronous federated learning over LEO constellations with long-term privacy.

The package is organised around a single pipeline: orbital visibility
prediction -> satellite partitioning -> staleness-aware round scheduling ->
fair aggregation -> event log -> privacy audit and convergence analysis.
"""

__version__ = "0.1.0"
