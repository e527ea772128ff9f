"""Context-conditioned adaptation of Behavior-Tree policy parameters."""

__version__ = "0.1.0"
