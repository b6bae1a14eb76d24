"""Local volatility calibration to an FX volatility matrix, with grid (American) and
Monte-Carlo (Asian) pricers."""

__version__ = "0.1.0"
