"""Trains the original-vs-pseudo-anomaly classifier and exports its backbone.

The backbone architecture and the weights file layout are shared with the
detection toolkit through the interchange format; the detection head is
dropped at export time.
"""

from .data import PairDataset, read_container, read_manifest
from .model import PretextClassifier, build_backbone
from .train import TrainConfig, TrainReport, export_weights, train

__version__ = "0.1.0"
