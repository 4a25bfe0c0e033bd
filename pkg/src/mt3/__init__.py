"""Meta test-time training (MT3) on a small numpy autodiff engine."""

__version__ = "0.1.0"
