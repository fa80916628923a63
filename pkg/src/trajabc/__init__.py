"""Action-based contrastive learning for pedestrian trajectory prediction."""

__version__ = "0.1.0"
