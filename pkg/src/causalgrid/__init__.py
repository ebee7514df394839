"""Grid-level causal inference for street-environment traffic safety studies."""

__version__ = "0.1.0"
