"""Multi-class unsupervised anomaly detection with a plain-ViT backbone.

Submodules are imported explicitly (vitad.training, vitad.cli, ...) so that
library use never drags in matplotlib.
"""

__version__ = "0.1.0"
