"""Complementary outfit-item synthesis with silhouette- and style-conditioned GANs."""

__version__ = "0.1.0"
