"""Neural policy mirror descent on manifold-structured MDPs, with exact oracles."""

__version__ = "0.1.0"
