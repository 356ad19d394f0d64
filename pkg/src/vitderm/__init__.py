"""Vision Transformer skin-lesion classification built on a small numpy autodiff core."""

__version__ = "0.1.0"
