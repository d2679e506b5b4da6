"""Image-text matching with similarity graph reasoning and attention filtration."""
from .config import RunConfig, load_config, toy_config
from .data import FeatureBank, SyntheticSpec, generate_synthetic_corpus, read_feature_bank, write_feature_bank
from .evaluation import fuse_scores, inspect_pair, recall_at_k
from .model import SgrafModel
from .tensor import Tensor
from .training import PairSet, ranking_loss, train

__version__ = "0.1.0"
