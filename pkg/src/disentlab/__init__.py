"""Speaker-disentangled masked-prediction representation learning on a synthetic speech world."""

__version__ = "0.1.0"
