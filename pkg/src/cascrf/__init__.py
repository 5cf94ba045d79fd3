"""Cascaded CRF refinement of salient-object prediction maps.

The package is organized around one pipeline: a small convolutional
backbone emits multi-scale features and side predictions, and a cascade
of CRF blocks refines them coarse-to-fine.  Each block passes messages
between adjacent-scale features, fuses a per-scale prediction with the
previous scale's estimate, and runs a few mean-field iterations whose
pairwise terms are Gaussian kernels evaluated with a permutohedral
lattice.

Modules:
    core      activations, resizing, tensor/image file formats
    lattice   dense and lattice-based Gaussian pairwise operators
    crf       a single refinement block: forward, mean-field, backward
    cascade   multi-scale model assembly and checkpointing
    backbone  the toy convolutional feature extractor
    data      synthetic shape datasets and side-output import/export
    train     losses, SGD, the two-stage training loop
    metrics   PR curves, F-measure, MAE
    cli       command-line entry points
"""

__version__ = "0.1.0"
