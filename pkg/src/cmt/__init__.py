"""CNN + multilevel self-attention classifier for chest X-ray images, built on a small numpy autodiff core."""

__version__ = "0.1.0"
