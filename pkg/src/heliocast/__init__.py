"""Multimodal day-ahead solar irradiance forecasting with spatio-temporal context."""

__version__ = "0.1.0"
