"""Debiasing text representations against intersectional (gerrymandering) groups.

Two debiasing families are provided: iterative nullspace projection of
learned features (``inlp``) and a constrained trainer solving a proxy
Lagrangian game (``constrained``). Both can target independent,
intersectional or gerrymandering group settings (``groups``) and are scored
on equality-of-opportunity violations (``metrics``).
"""
from .data import AttributeSchema, Dataset, SyntheticSpec, generate_synthetic, load_dataset, split
from .groups import GroupKind, GroupSet, build_group_set, enumerate_groups, gerry_group_set
from .inlp import InlpConfig, ProjectionState, apply_projection, inlp_run
from .constrained import ConstraintSpec, constrained_train, train_unconstrained
from .metrics import EvalPoint, f1_score, pareto_frontier, select_under_tradeoff, tpr_violations
from .probes import LinearProbe, ProbeConfig, train_probe

__version__ = "0.1.0"
