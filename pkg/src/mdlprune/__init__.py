"""Budget-aware multi-domain channel pruning.

Train one frozen shared backbone whose per-domain binary channel switches are
pushed toward a common filter subset under a user budget, then physically
prune the channels no domain uses.
"""

from .autograd import Tape, Tensor, backward
from .config import ExperimentConfig, default_experiment
from .data import Dataset, DomainSpec, augment, generate_domain
from .losses import (BudgetState, SharingState, budget_loss, sharing_jaccard,
                     sharing_intersection, sharing_union, soft_union,
                     total_loss, update_multipliers)
from .model import MultiDomainNet, NetConfig, default_backbone
from .pruner import PrunedModel, prune, pruned_forward, sparsity, union_mask
from .trainer import RunRecord, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward",
    "ExperimentConfig", "default_experiment",
    "Dataset", "DomainSpec", "augment", "generate_domain",
    "BudgetState", "SharingState", "budget_loss", "soft_union",
    "sharing_intersection", "sharing_union", "sharing_jaccard",
    "total_loss", "update_multipliers",
    "MultiDomainNet", "NetConfig", "default_backbone",
    "PrunedModel", "prune", "pruned_forward", "sparsity", "union_mask",
    "RunRecord", "TrainConfig", "evaluate", "train",
]
