"""Admittance-guided stability toolkit for grid-forming inverter microgrids."""
__version__ = "0.1.0"
