"""Attentional activation (ATAC) units and the numpy machinery around them."""

__version__ = "0.1.0"

from .autograd import Parameter, Tape, backward, gradcheck  # noqa: E402
from .data import ChecksumError, DataError, LabeledBatch, parse_cifar10, parse_cifar100  # noqa: E402
from .estimator import ATACResNetClassifier  # noqa: E402
from .train import TrainConfig, build_model, evaluate, train  # noqa: E402
from .units import ActivationKind, AtacUnit, NiNBlock, SEActivationUnit, activate  # noqa: E402
from .zoo import (  # noqa: E402
    ModelGraph,
    ReplacementPolicy,
    apply_replacement,
    build_resnet20v2,
    build_resnet50v1b,
    count_flops,
    count_params,
)

__all__ = [
    "ATACResNetClassifier",
    "ActivationKind",
    "AtacUnit",
    "ChecksumError",
    "DataError",
    "LabeledBatch",
    "ModelGraph",
    "NiNBlock",
    "Parameter",
    "ReplacementPolicy",
    "SEActivationUnit",
    "Tape",
    "TrainConfig",
    "activate",
    "apply_replacement",
    "backward",
    "build_model",
    "build_resnet20v2",
    "build_resnet50v1b",
    "count_flops",
    "count_params",
    "evaluate",
    "gradcheck",
    "parse_cifar10",
    "parse_cifar100",
    "train",
]
