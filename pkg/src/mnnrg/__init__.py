"""Reference governors (PRG, NN-RG, MNN-RG) with sensitivity-based correction."""

__version__ = "0.1.0"
