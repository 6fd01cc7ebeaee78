"""Band-split bidirectional Mamba2 vocal separation on a small numpy autodiff core."""

__version__ = "0.1.0"
