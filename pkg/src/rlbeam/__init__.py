"""Learning analog beams and beam codebooks from receive-power feedback."""

__version__ = "0.1.0"
