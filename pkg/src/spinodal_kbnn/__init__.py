"""Phase-field spinodal decomposition data generation and knowledge-based networks
for the homogenized mechanical response."""

__version__ = "0.1.0"
