"""depthgeo: self-supervised depth estimation machinery at desk scale."""

__version__ = "0.1.0"
