"""Comparison defense strategies: uniform thresholds, adversarial
re-training, and tuning a single node's threshold by simulated utility.
"""

from __future__ import annotations

import numpy as np

from .attacker import attack_dataset
from .dataset import LabeledDataset, LogisticModel, train_logistic
from .detector import DetectorBank, uniform_bank
from .diffusion import _template, _times_from_uniforms, all_trees, edge_rates
from .netgen import Network

THRESHOLD_GRID = np.round(np.arange(0.05, 0.951, 0.05), 2)


def baseline_uniform(model: LogisticModel, network: Network, theta: float = 0.5) -> DetectorBank:
    """The plain deployment: one trained model, every threshold at 0.5."""
    return uniform_bank(model, network.n_nodes, theta=theta)


def retraining_defense(
    base_set: LabeledDataset,
    network: Network,
    epsilon: float,
    max_rounds: int = 10,
    move_tol: float = 1e-4,
    attack_subset: int | None = None,
    epochs: int = 2000,
    l2_reg: float = 1e-4,
    trees: list | None = None,
):
    """Iterative adversarial data augmentation with homogeneous 0.5 thresholds.

    Each round trains the scorer on the augmented data, lets the attacker
    evade the current uniform bank on the (optionally subsampled) original
    malicious instances, and adds the evasions labeled malicious.  Stops
    when payloads move less than move_tol in l2 between rounds.  Returns
    (bank, n_rounds).
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    if trees is None:
        trees = all_trees(network)
    mal_X = base_set.malicious()
    if attack_subset is not None and attack_subset < len(mal_X):
        mal_X = mal_X[:attack_subset]
    X_aug, y_aug = base_set.X, base_set.y
    prev_payloads = None
    model = None
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        model, _ = train_logistic(
            LabeledDataset(X_aug, y_aug, split_tag="base"), epochs=epochs, l2_reg=l2_reg
        )
        bank = uniform_bank(model, network.n_nodes)
        plans = attack_dataset(network, bank, mal_X, epsilon, trees=trees)
        payloads = np.array([p.payload for p in plans])
        ref = mal_X if prev_payloads is None else prev_payloads
        movement = float(np.linalg.norm(payloads - ref, axis=1).max(initial=0.0))
        if movement < move_tol:
            break
        prev_payloads = payloads
        X_aug = np.vstack([X_aug, payloads])
        y_aug = np.concatenate([y_aug, np.ones(len(payloads), dtype=np.int64)])
    return uniform_bank(model, network.n_nodes), rounds


def _origin_influence(network, bank_base_blocked, rates, u_matrix, T):
    """Per-origin influence under the base blocked mask, but with the origin
    itself force-unblocked (a tuned threshold can always let its own node pass).

    Shares the frozen delay samples across origins: unblocked origins are
    covered by one multi-source pass per sample; blocked origins each get a
    single-source pass on the graph where only they are unblocked.
    """
    n = network.n_nodes
    tpl = _template(network)
    blocked = bank_base_blocked
    out = np.zeros(n)
    open_sources = np.where(~blocked)[0]
    adj = network.adjacency()
    # a blocked-by-default origin whose neighbors are all blocked reaches only itself
    solo = np.array([blocked[i] and bool(blocked[adj[i]].all()) for i in range(n)])
    for s in range(len(u_matrix)):
        times = _times_from_uniforms(u_matrix[s], rates)
        if len(open_sources):
            dist = tpl.distances(times, blocked, open_sources, limit=T)
            out[open_sources] += ((dist <= T) & ~blocked[None, :]).sum(axis=1)
        for i in np.where(blocked & ~solo)[0]:
            mask = blocked.copy()
            mask[i] = False
            dist = tpl.distances(times, mask, [int(i)], limit=T)[0]
            out[i] += int(((dist <= T) & ~mask).sum())
    out /= len(u_matrix)
    out[solo] = 1.0
    return out


def personalized_single_threshold(
    network: Network,
    model: LogisticModel,
    train_set: LabeledDataset,
    alpha: float,
    T: float,
    n_sims: int = 1000,
    seed: int = 0,
    grid: np.ndarray = THRESHOLD_GRID,
):
    """Tune exactly one node's threshold; all others stay at 0.5.

    For each node i the utility of starting every (unattacked) training
    instance at i is estimated from simulated propagations, with one
    frozen set of delay samples per instance reused across the whole
    threshold grid so the argmax is not dominated by simulation noise.
    Returns (bank, report) where report records the chosen node/threshold
    and the full utility table.
    """
    base = uniform_bank(model, network.n_nodes)
    scores = model.score(train_set.X)
    utility = np.zeros((network.n_nodes, len(grid)))
    for idx in range(len(train_set)):
        x = train_set.X[idx]
        rates = edge_rates(network, x)
        blocked = ~base.passes_mask(x)
        u = np.random.default_rng(np.random.SeedSequence((seed, idx))).random(
            (n_sims, network.n_edges)
        )
        sigma = _origin_influence(network, blocked, rates, u, T)
        sign = -(1.0 - alpha) if train_set.y[idx] == 1 else alpha
        passes = scores[idx] <= grid  # whether theta_i lets x start at i
        utility += sign * np.outer(sigma, passes.astype(float))
    best_i, best_t = np.unravel_index(np.argmax(utility), utility.shape)
    thresholds = np.full(network.n_nodes, 0.5)
    thresholds[best_i] = grid[best_t]
    report = {
        "node": int(best_i),
        "theta": float(grid[best_t]),
        "utility": float(utility[best_i, best_t]),
        "table": utility,
        "grid": grid,
    }
    return base.with_thresholds(thresholds), report
