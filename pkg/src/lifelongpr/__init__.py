"""Lifelong point-cloud place recognition on synthetic LiDAR domains.

Replay selection weighs each training domain by the normalised effective rank
of its descriptor kernel, picks diverse samples greedily, and a small prompt
network conditions a frozen backbone between domains.
"""

from .data import DomainProfile, SequenceSpec, desk_profiles, generate_sequence, load_sequence
from .infoq import allocate_sizes, info_quantity, info_quantity_from_features, uniform_sizes
from .metrics import RecallMatrix, forgetting_score, mean_incremental_recall, mean_recall
from .selection import ReplayBuffer, greedy_select, update_buffer
from .trainer import StageConfig, run_sequence

__version__ = "0.1.0"

__all__ = [
    "DomainProfile", "SequenceSpec", "desk_profiles", "generate_sequence", "load_sequence",
    "allocate_sizes", "info_quantity", "info_quantity_from_features", "uniform_sizes",
    "RecallMatrix", "forgetting_score", "mean_incremental_recall", "mean_recall",
    "ReplayBuffer", "greedy_select", "update_buffer", "StageConfig", "run_sequence",
]
