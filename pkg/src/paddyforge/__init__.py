"""Numpy CNN training engine: layers with backprop, LR range test, augmentation,
mixup, TTA, gradient accumulation, mixed precision and weighted ensembles."""
from .tensor import Precision, Shape2D, Tensor
from .nn import LayerSpec, Network, build_network, set_trainable
from .optim import EpochMetrics, ResizeSchedule, TrainConfig, fit, lr_sweep, suggest_lr_valley, train_epoch
from .data import Dataset, gen_synthetic_dataset, load_image_dataset, stratified_split
from .evaluation import EnsembleMember, EnsembleSpec, TTAConfig, ensemble_evaluate, evaluate
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
