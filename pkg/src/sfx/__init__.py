"""Stochastic Maxwell-Bloch simulator for x-ray spontaneous emission, ASE and superfluorescence."""

__version__ = "0.1.0"
