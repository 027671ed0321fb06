"""Offline joint training of the unrolled uplink decoder and URA codebook."""

from .evaluate import evaluate, project_counts
from .network import UnrolledDecoder
from .train import TrainConfig, TrainResult, train
from .weight_io import read_weight_file, write_weight_file

__version__ = "0.1.0"
