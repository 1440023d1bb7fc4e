"""Phase-space decompositions and trilinear model forms for bilinear singular integrals."""

__version__ = "0.1.0"
