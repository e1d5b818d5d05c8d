"""Self-supervised kidney segmentation: siamese side-classification pre-training,
encoder transfer, and a dense encoder-decoder segmentation network."""

__version__ = "0.1.0"
