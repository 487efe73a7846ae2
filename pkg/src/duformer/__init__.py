"""DUFormer: CNN-Transformer hybrid for thin power-line segmentation, on a numpy autograd core."""

__version__ = "0.1.0"
