"""Shift attention layers: convolutions with an annealed per-slice softmax mask
that binarise into shift layers (a spatial shift plus a 1x1 convolution)."""
from .convert import CostReport, EquivalenceError, binarize, convert_module, profile, verify_equivalence
from .data import PlantedShiftSpec, gen_planted, load_cifar10, load_dataset, save_dataset
from .estimator import SALClassifier
from .model import Checkpoint, ModelSpec, Network, build_model, convert_network, load_state_dict, state_dict
from .nn import SGD, Conv2d, SgdConfig, conv2d, conv2d_reference
from .sal import SalLayer, TemperatureSchedule, alpha_for, anneal, attention_mask
from .shift import ShiftLayer, ShiftTable, SparseShiftLayer, predetermined_table, shift_forward
from .tensor import Rng, Tensor, default_dtype, set_debug, set_default_dtype
from .train import TrainConfig, Trainer, evaluate, train

__version__ = "0.1.0"
