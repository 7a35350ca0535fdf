"""Graph + sequence encoders co-trained with alignment and uniformity losses."""

from .data import Dataset, build_dataset, five_core_filter, ingest, load_dataset
from .losses import LossConfig
from .model import GSAUModel, ModelConfig

__version__ = "0.1.0"
