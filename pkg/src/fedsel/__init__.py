"""fedsel: a deterministic federated-learning simulator with pluggable
client-selection strategies (weighted random, loss polling, stale-loss
ranking, and discounted-UCB)."""

__version__ = "0.1.0"
