"""Active mapping laboratory: online Gaussian-splat reconstruction plus
topology-guided exploration inside a synthetic RGB-D box-world."""

__version__ = "0.1.0"
