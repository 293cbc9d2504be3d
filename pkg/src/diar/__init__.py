"""diar: synthetic distorted-sequence generation, dense-descriptor image
alignment, and robust sequence-to-image reconstruction."""

from . import aggregator, baselines, cli, datagen, descriptors, geometry, imaging, matching, metrics, tensor

__all__ = [
    "aggregator",
    "baselines",
    "cli",
    "datagen",
    "descriptors",
    "geometry",
    "imaging",
    "matching",
    "metrics",
    "tensor",
]

__version__ = "0.1.0"
