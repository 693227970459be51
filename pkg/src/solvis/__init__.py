"""Computer-vision solubility assessment of flask images."""

__version__ = "0.1.0"
