"""Goal-conditioned vision-to-action behavior cloning for catheter navigation."""

__version__ = "0.1.0"
