"""spreadguard: heterogeneous detection thresholds on social networks
against an attacker who picks both the seed node and an evasion-perturbed
payload, on top of a content-dependent continuous-time diffusion model.
"""

from .attacker import AttackPlan, attack_dataset, evade_for_node, optimal_attack
from .baselines import baseline_uniform, personalized_single_threshold, retraining_defense
from .dataset import (
    LabeledDataset,
    LogisticModel,
    generate_corpus,
    load_spambase,
    normalize_minmax,
    split,
    train_logistic,
)
from .defender import (
    DefenseResult,
    KktState,
    grad_theta,
    implicit_dz_dtheta,
    pgd_defense,
    sse_defense,
    surrogate_defender_objective,
)
from .detector import DetectorBank, classify, dc_dtheta, dind_dtheta, surrogate_c
from .diffusion import (
    CascadeSample,
    PropagationTree,
    build_tree,
    estimate_influence,
    estimate_influence_profile,
    sample_edge_time,
    simulate_cascade,
    surrogate_spread,
)
from .harness import ExperimentConfig, defender_utility, reproduce_figures, run_protocol
from .netgen import (
    Network,
    generate_ba,
    generate_ws,
    graph_stats,
    load_network,
    sample_edge_params,
    save_network,
)

__version__ = "0.1.0"
