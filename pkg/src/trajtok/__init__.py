"""trajtok: point-token trajectory forecasting at desk scale."""

__version__ = "0.1.0"
