"""Semi-supervised lesion segmentation on a numpy autograd substrate."""

__version__ = "0.1.0"
