"""Multi-branch person re-identification with scene disentangling
augmentations and mutual learning."""

from .augment import AugmentConfig, BranchInputs, homologous_expand, random_erase, random_scale
from .data import Dataset, ImageSample, ToyConfig, generate_toy_dataset, load_market_format, sample_pk_batch
from .evaluation import FeatureTable, MetricsReport, evaluate_cmc_map, pairwise_distances
from .losses import LossBundle, LossConfig, total_loss
from .model import MultiBranchModel, build_model, extract_concat_features
from .train import TrainConfig, lr_schedule, train_lds
from .config import RunConfig, load_config, load_preset
from .pipeline import load_datasets, load_trained, train_run

__version__ = "0.1.0"
