"""Conservation-preserving DeepONet surrogates for linear kinetic collision operators."""

__version__ = "0.1.0"
