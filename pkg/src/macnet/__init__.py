"""MAC and S-MAC reasoning cells with a micro CoGenT transfer-learning harness."""

__version__ = "0.1.0"
