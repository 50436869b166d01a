"""Two-step consensus: protocol state machine, simulator and checkers."""

__version__ = "0.1.0"
