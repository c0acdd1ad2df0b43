"""Privacy/utility/cost trade-offs for vertically federated SecureBoost.

Modules: :mod:`data` (two-party datasets), :mod:`secureboost` (training with
an HE cost ledger and leaf trace), :mod:`attack` (instance clustering label
inference), :mod:`moo` (NSGA-II machinery and hypervolume), :mod:`cmosb`
(evaluation and constrained search) and :mod:`cli`.
"""
from .attack import AttackReport, instance_clustering_attack, similarity_matrix, spectral_cluster
from .cmosb import EvaluationRecord, RunConfig, cmosb_run, empirical_baseline, grid_search, normalize_objectives, sbo
from .data import AttackProbeSet, VerticalDataset, gen_synthetic, load_csv, sample_balanced_probe, split_train_test
from .moo import Constraints, Genome, crowding_distance, hypervolume, non_dominated_sort, penalize
from .secureboost import CostLedger, CostModel, Hyperparameters, LeafTrace, train

__version__ = "0.1.0"
