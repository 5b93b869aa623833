"""Multi-vehicle pursuit with attention-based target grouping, per-agent DQN
and prioritization-network experience selection."""

__version__ = "0.1.0"
