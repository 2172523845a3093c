"""Semi-supervised image classification via consistency regularization.

The package combines four training signals on top of a small reverse-mode
tensor engine: supervised cross-entropy, virtual adversarial perturbations,
entropy minimization, and a consistency loss against inputs whose
low-sensitivity regions have been replaced by noise. It ships the matching
evaluation protocols (batch-norm statistics refresh), dataset tooling, and
a desk-scale synthetic benchmark.
"""

__version__ = "0.1.0"
