"""Poison-sample selection for dirty-label backdoor attacks.

Similarity-filtered selection (PFS) and its baselines, a poison/train/evaluate
harness, a toy kernel-regression check and reporting over the results log.
"""

from .core import (ArtifactStore, DatasetRef, InvariantError, PoisonPlan, RunReport, TriggerSpec, derive_rng,
                   load_plan, poison_count, save_plan)
from .data import ImageDataset, from_arrays, make_synthetic, open_dataset
from .features import (ExtractorHandle, SimilarityTable, TrainRecipe, embed, identity_extractor, similarity_table,
                       train_extractor)
from .harness import VictimConfig, build_poisoned_dataset, evaluate, train_victim
from .selection import (StrategyConfig, select_extremes, select_fus, select_fus_pfs, select_pfs, select_random)
from .triggers import apply_trigger, badnets_trigger, blended_trigger, generate_uap, register_trigger_plugin

__version__ = "0.1.0"

__all__ = [
    "ArtifactStore", "DatasetRef", "InvariantError", "PoisonPlan", "RunReport", "TriggerSpec", "derive_rng",
    "load_plan", "poison_count", "save_plan", "ImageDataset", "from_arrays", "make_synthetic", "open_dataset",
    "ExtractorHandle", "SimilarityTable", "TrainRecipe", "embed", "identity_extractor", "similarity_table",
    "train_extractor", "VictimConfig", "build_poisoned_dataset", "evaluate", "train_victim", "StrategyConfig",
    "select_extremes", "select_fus", "select_fus_pfs", "select_pfs", "select_random", "apply_trigger",
    "badnets_trigger", "blended_trigger", "generate_uap", "register_trigger_plugin",
]
