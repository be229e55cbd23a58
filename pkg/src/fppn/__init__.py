"""Future dense-depth / pseudo-LiDAR frame prediction pipeline."""

__version__ = "0.1.0"
