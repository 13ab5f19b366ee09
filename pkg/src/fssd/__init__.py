"""Out-of-distribution detection by distance to the feature-space singularity."""

__version__ = "0.1.0"
