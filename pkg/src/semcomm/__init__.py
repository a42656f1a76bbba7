"""Semantic communication simulator: model-aware and reinforcement-learned encoder/decoder training over AWGN."""

__version__ = "0.1.0"
