"""Backdoor construction, detection and mitigation for two-player RL agents."""

__version__ = "0.1.0"
