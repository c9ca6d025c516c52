"""Point cloud networks combining global perception with local structure fitting."""

__version__ = "0.1.0"
