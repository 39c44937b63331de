"""Learning stochastic coarse-grained dynamics of lattice gases from KMC data."""

__version__ = "0.1.0"
