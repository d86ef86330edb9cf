"""Room impulse response synthesis with neural acoustic fields."""

__version__ = "0.1.0"
