"""Cooperative retrieval-augmented emotion agents trained with multi-agent PPO on a synthetic multimodal environment"""

__version__ = "0.1.0"
