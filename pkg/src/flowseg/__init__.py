"""Generative data augmentation for salt-body segmentation.

Two generative models cooperate: a dense autoencoder samples binary salt
masks, and a mask-conditioned invertible image model renders matching
seismic-style patches.  The package also carries the patch-extraction
pipeline, a small U-net segmenter, and the IoU-based sweep protocol that
measures how many generated pairs actually help.
"""

__version__ = "0.1.0"
