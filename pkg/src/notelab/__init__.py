"""notelab: desk-scale pre-training and embedding-analysis workbench for text encoders."""

__version__ = "0.1.0"
