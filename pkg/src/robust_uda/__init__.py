"""Adversarially robust unsupervised domain adaptation via meta self-training."""
from .attacks import ATTACK_NAMES, AttackBudget, attack, fgsm, margin_pgd, named_attack, pgd, project_linf
from .augment import GridShape, RmaConfig, rma
from .core import Arch, Model, forward_features, forward_logits, init_model, predict, rng_for
from .data import DomainPair, gen_gaussian_shift, gen_grid_shift, gen_two_moons_shift, load_dataset, save_dataset
from .errors import (
    CapabilityError,
    ConfigError,
    DivergenceError,
    RobustUdaError,
    SchemaError,
    ShapeError,
    ValidationError,
)
from .evaluate import clean_accuracy, export_embeddings, feature_distance, robust_accuracy
from .runner import RunConfig, compare_schemes, run_experiment
from .selftrain import SelfTrainConfig, meta_gradient, run_at_uda, run_source_only_at, run_srouda, run_uda, run_uda_at
from .uda import MddConfig, pretrain_source

__version__ = "0.1.0"
