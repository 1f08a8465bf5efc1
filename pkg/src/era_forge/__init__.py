"""Music era recognition: audio and audio+artist models trained with contrastive objectives."""

__version__ = "0.1.0"
