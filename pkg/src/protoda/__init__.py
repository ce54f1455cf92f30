"""Prototype-based explanations of what a domain-adaptation model transfers."""

__version__ = "0.1.0"

from .base_model import BaseModel, PseudoLabels, load_base, pseudo_label, save_base, train_base
from .calibration import PrototypicalHead, calibration_loss, fidelity_loss, init_head
from .config import BaseConfig, RunConfig, TrainConfig, resolve
from .datasets import DomainPair, ImageSample, SyntheticSpec, TargetShift, generate_synthetic_pair, \
    load_directory_pair
from .explain import bbox, emit_report, heatmap, match_cross_domain
from .inspection import fidelity_ablation, mask_prototype, rank_prototypes, removal_sweep, spearman
from .protolayer import PrototypeBank, cluster_loss, min_distances, project_prototypes, separation_loss, similarity
from .trainer import InterpretiveModel, evaluate, load_interp, run_protocol, save_interp
