"""Multi-task learning with split primary-task towers and gradient routing."""

__version__ = "0.1.0"
