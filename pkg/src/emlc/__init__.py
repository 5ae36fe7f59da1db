"""Teacher-student meta label correction with fast bi-level meta-gradients."""

__version__ = "0.1.0"
