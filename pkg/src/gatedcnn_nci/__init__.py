"""GatedCNN-NCI: gated dilated-convolution encoder with note-code interaction."""

__version__ = "0.1.0"
