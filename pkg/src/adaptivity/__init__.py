"""Limited-adaptivity linear contextual bandits and distributional G-optimal designs."""

__version__ = "0.1.0"
