"""Regime-switching stochastic control: simulation, BSDE regression, maximum principle checks and HJB."""

__version__ = "0.1.0"
