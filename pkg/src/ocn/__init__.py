"""Landmark Gabor filters and orientation convolutional networks.

Pipeline: generate an oriented Gabor filter bank, compress it into a few
landmark filters plus sparse mixing coefficients via a joint low-rank and
sparse matrix factorization, then use the reconstructed oriented kernels to
modulate the learned filters of a small convolutional network trained on
digit data.
"""

__version__ = "0.1.0"
