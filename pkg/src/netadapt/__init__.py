"""Platform-aware network adaptation: greedy, measurement-guided filter pruning."""

__version__ = "0.1.0"
