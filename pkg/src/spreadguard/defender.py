"""Threshold defense: fixed-seed projected gradient descent and the
commit-first equilibrium heuristic.

The defender minimizes a piecewise-smooth surrogate of negative utility,

    F = (1-a) * sum_{x mal} ind_s(z(x)) * S_s(z(x))
      -    a  * sum_{x ben} sum_j ind_j(x) * S_j(x),

where ind and the per-layer coefficients inside S are ramped logit
margins clip(logit(theta) - raw(.), 0, 1) standing in for the pass
indicators, and z(x) is the attacker's optimal payload for the assumed
seed.  Both clamps matter: an unclamped margin makes a caught payload
(two negative factors) look profitable to the attacker's side of the
objective, and keeps rewarding higher thresholds long after the true
indicator has saturated at 1, driving every threshold to the open
extreme.  The ramp keeps each factor aligned with the 0/1 indicator it
replaces while preserving the margin's slope on the transition band.

The payload's dependence on the thresholds is differentiated through the
attacker's KKT system via the implicit function theorem; all remaining
dependencies are differentiated explicitly, so the assembled gradient
matches finite differences through the re-solved attacker wherever no
hinge sits exactly at its kink.

The outer heuristic runs the fixed-seed descent for every candidate seed,
lets the attacker best-respond to each resulting bank, and keeps the bank
with the best true Monte Carlo utility.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import attacker as _attacker
from .attacker import AttackPlan, attack_dataset, detection_halfspace, evade_for_node
from .dataset import LabeledDataset, LogisticModel
from .detector import THETA_CLAMP, DetectorBank, logit_slope, uniform_bank
from .diffusion import PropagationTree, all_trees
from .netgen import Network

KKT_TOL = 1e-6
DIVERGENCE_GUARD = 1e12
SEED_SCREEN_THETA = 0.05


@dataclass
class KktState:
    """Attacker primal/dual pair at an accepted payload."""

    z: np.ndarray
    lam: float
    mu: np.ndarray
    eta: np.ndarray
    active_nodes: np.ndarray
    residual: float


@dataclass
class AttackedPayload:
    """Per-instance attack snapshot used by the defense objective/gradient."""

    x: np.ndarray
    z: np.ndarray
    feasible: bool
    kkt: KktState | None = None


@dataclass
class DefenseResult:
    thresholds: np.ndarray
    surrogate_value: float
    trajectory: list
    assumed_seed: int


def solve_attacked_payload(
    tree: PropagationTree,
    bank: DetectorBank,
    x: np.ndarray,
    epsilon: float,
    z0: np.ndarray | None = None,
    floor=None,
) -> AttackedPayload:
    """Attacker solve for a fixed seed plus multiplier recovery."""
    z, _, feasible = evade_for_node(tree, bank, x, epsilon, z0=z0, floor=floor)
    if not feasible:
        return AttackedPayload(x=x, z=x.copy(), feasible=False)
    a = tree.direction()
    w, c = detection_halfspace(bank)
    lam, mu_total, eta, resid = _attacker.recover_multipliers(z, x, epsilon, a, w, c)
    raw_z = float(bank.model.raw(z))
    logits = bank.logits()
    active = np.where(np.abs(raw_z - logits) <= 1e-7 * (1.0 + np.abs(logits)))[0]
    mu = np.full(len(active), mu_total / len(active)) if len(active) else np.zeros(0)
    kkt = KktState(z=z, lam=lam, mu=mu, eta=eta, active_nodes=active, residual=resid)
    return AttackedPayload(x=x, z=z, feasible=True, kkt=kkt)


class _BenignCache:
    """Threshold-independent pieces of the benign surrogate term.

    Flattens every root's layered expansion into one row block so the
    objective and gradient reduce to a handful of vectorized passes.
    """

    def __init__(self, trees, benign_X, model: LogisticModel):
        self.n_nodes = len(trees)
        benign_X = np.asarray(benign_X, dtype=np.float64)
        self.n_benign = len(benign_X)
        blocks = [t for t in trees if len(t.nodes_flat)]
        if self.n_benign == 0 or not blocks:
            self.empty = True
            return
        benign_X = benign_X.reshape(self.n_benign, -1)
        self.empty = False
        self.nodes_cat = np.concatenate([t.nodes_flat for t in blocks])
        self.root_of_row = np.concatenate(
            [np.full(len(t.nodes_flat), t.root, dtype=np.int64) for t in blocks]
        )
        self.roots = np.array([t.root for t in blocks], dtype=np.int64)
        sizes = np.array([len(t.nodes_flat) for t in blocks])
        self.seg_starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        kA = np.vstack([t.k_flat[:, None] * t.A_flat for t in blocks])
        self.P = kA @ benign_X.T  # (total rows, B): k_l * (w_row . x)
        self.r_b = model.raw(benign_X)

    def objective(self, logits: np.ndarray) -> float:
        if self.empty:
            return 0.0
        c_raw = logits[self.nodes_cat, None] - self.r_b[None, :]
        c_ramp = np.clip(c_raw, 0.0, 1.0)
        inner = np.add.reduceat(c_ramp * self.P, self.seg_starts, axis=0)
        ind_raw = logits[self.roots, None] - self.r_b[None, :]
        ind = np.clip(ind_raw, 0.0, 1.0)
        self._inner = inner
        self._ind = ind
        self._ind_band = (ind_raw > 0.0) & (ind_raw < 1.0)
        self._c_band = (c_raw > 0.0) & (c_raw < 1.0)
        return float((ind * inner).sum())

    def gradient(self, logits: np.ndarray, slopes: np.ndarray) -> np.ndarray:
        grad = np.zeros(self.n_nodes)
        if self.empty:
            return grad
        self.objective(logits)
        np.add.at(
            grad, self.roots,
            slopes[self.roots] * (self._ind_band * self._inner).sum(axis=1),
        )
        ind_rows = self._ind[np.searchsorted(self.roots, self.root_of_row)]
        rowdot = (ind_rows * self.P * self._c_band).sum(axis=1)
        np.add.at(grad, self.nodes_cat, slopes[self.nodes_cat] * rowdot)
        return grad


def _malicious_term(bank: DetectorBank, tree: PropagationTree, z: np.ndarray):
    """Ramped factors of one malicious surrogate term.

    Returns (ind, ind_band, c_ramp, c_band, mvec, S) where
    ind = clip(logit(theta_root) - raw(z), 0, 1), c_ramp holds the ramped
    per-row margins, the band flags mark where the ramp has slope, mvec
    the k-weighted rates, and S = c_ramp . mvec.
    """
    logits = bank.logits()
    r_z = float(bank.model.raw(z))
    ind_raw = logits[tree.root] - r_z
    ind = float(np.clip(ind_raw, 0.0, 1.0))
    ind_band = 0.0 < ind_raw < 1.0
    if len(tree.nodes_flat) == 0:
        return ind, ind_band, np.zeros(0), np.zeros(0, dtype=bool), np.zeros(0), 0.0
    c_raw = logits[tree.nodes_flat] - r_z
    c_ramp = np.clip(c_raw, 0.0, 1.0)
    mvec = tree.k_flat * (tree.A_flat @ z)
    return ind, ind_band, c_ramp, (c_raw > 0.0) & (c_raw < 1.0), mvec, float(c_ramp @ mvec)


def surrogate_defender_objective(
    bank: DetectorBank,
    trees: list,
    benign_X,
    attacked: list,
    assumed_seed: int,
    alpha: float,
    benign_cache: _BenignCache | None = None,
) -> float:
    """Surrogate objective (to be minimized): (1-a)*malicious - a*benign."""
    tree = trees[assumed_seed]
    mal = 0.0
    for item in attacked:
        z = item.z if isinstance(item, AttackedPayload) else np.asarray(item[1])
        ind, _, _, _, _, S = _malicious_term(bank, tree, z)
        mal += ind * S
    if benign_cache is None:
        benign_cache = _BenignCache(trees, benign_X, bank.model)
    ben = benign_cache.objective(bank.logits())
    return (1.0 - alpha) * mal - alpha * ben


def implicit_dz_dtheta(
    kkt: KktState,
    tree: PropagationTree,
    bank: DetectorBank,
    x: np.ndarray,
    epsilon: float,
) -> np.ndarray:
    """Payload sensitivity dz/dTheta (n x N) from the attacker's KKT system.

    Builds the stationarity/complementarity map f(Theta, z, lam, mu, eta),
    differentiates it, and solves the linear implicit-function system.  A
    rank-deficient Jacobian falls back to a ridge-regularized solve (with a
    warning); thresholds never appearing in an active constraint get zero
    columns.
    """
    if kkt.residual > KKT_TOL:
        raise ValueError(f"KKT residual {kkt.residual:.2e} exceeds {KKT_TOL}")
    z, lam, eta = kkt.z, kkt.lam, kkt.eta
    n = len(z)
    N = bank.n_nodes
    active = kkt.active_nodes
    m = len(active)
    J = np.zeros((n, N))
    if m == 0:
        return J
    a = tree.direction()
    w = bank.model.weights
    dim = 2 * n + 1 + m
    M = np.zeros((dim, dim))
    # stationarity rows: -a + 2*lam*(z-x) + sum(mu)*w - eta
    M[:n, :n] = 2.0 * lam * np.eye(n)
    M[:n, n] = 2.0 * (z - x)
    for k in range(m):
        M[:n, n + 1 + k] = w
    M[:n, n + 1 + m:] = -np.eye(n)
    # budget complementarity row: lam * g(z, x)
    g = float((z - x) @ (z - x)) - epsilon
    M[n, :n] = 2.0 * lam * (z - x)
    M[n, n] = g
    # active detection equalities: raw(z) - logit(theta_k)
    M[n + 1:n + 1 + m, :n] = w[None, :]
    # orthant complementarity rows: eta * (-z)
    M[n + 1 + m:, :n] = -np.diag(eta)
    M[n + 1 + m:, n + 1 + m:] = -np.diag(z)
    if not np.isfinite(M).all():
        raise ValueError("non-finite entries in the implicit-function Jacobian")

    rhs = np.zeros((dim, m))
    slopes = logit_slope(bank.thresholds[active])
    for k in range(m):
        rhs[n + 1 + k, k] = slopes[k]  # -d f3_k / d theta_k
    try:
        sol = np.linalg.solve(M, rhs)
        if not np.isfinite(sol).all() or np.linalg.norm(M @ sol - rhs) > 1e-6 * (
            1.0 + np.linalg.norm(rhs)
        ):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        warnings.warn("rank-deficient implicit system; using ridge-regularized solve")
        sol = np.linalg.solve(M.T @ M + 1e-8 * np.eye(dim), M.T @ rhs)
    J[:, active] = sol[:n, :]
    return J


def grad_theta(
    bank: DetectorBank,
    trees: list,
    benign_X,
    attacked: list,
    assumed_seed: int,
    alpha: float,
    epsilon: float,
    include_implicit: bool = True,
    benign_cache: _BenignCache | None = None,
) -> np.ndarray:
    """Chain-rule gradient of the surrogate objective in the thresholds.

    Explicit pieces cover the direct threshold dependence of the indicator
    surrogates; the implicit piece routes through dz/dTheta for feasible
    attacked payloads (benign content is never modified, so its term has
    no implicit part).
    """
    tree = trees[assumed_seed]
    N = bank.n_nodes
    logits = bank.logits()
    slopes = logit_slope(bank.thresholds)
    w_model = bank.model.weights
    grad_mal = np.zeros(N)
    for item in attacked:
        z = item.z
        ind, ind_band, c_ramp, c_band, mvec, S = _malicious_term(bank, tree, z)
        if ind_band:
            grad_mal[tree.root] += slopes[tree.root] * S
        if len(tree.nodes_flat):
            np.add.at(
                grad_mal, tree.nodes_flat,
                ind * slopes[tree.nodes_flat] * mvec * c_band,
            )
        if include_implicit and item.feasible and item.kkt is not None and item.kkt.residual <= KKT_TOL:
            J = implicit_dz_dtheta(item.kkt, tree, bank, item.x, epsilon)
            if len(tree.nodes_flat):
                dS_dz = tree.A_flat.T @ (tree.k_flat * c_ramp) - float(
                    tree.k_flat @ ((tree.A_flat @ z) * c_band)
                ) * w_model
            else:
                dS_dz = np.zeros_like(w_model)
            dr = J.T @ w_model
            grad_mal += -S * (float(ind_band) * dr) + ind * (J.T @ dS_dz)
    if benign_cache is None:
        benign_cache = _BenignCache(trees, benign_X, bank.model)
    grad_ben = benign_cache.gradient(logits, slopes)
    return (1.0 - alpha) * grad_mal - alpha * grad_ben


def pgd_defense(
    network: Network,
    train_set: LabeledDataset,
    assumed_seed: int,
    alpha: float,
    epsilon: float,
    iters: int = 50,
    beta0: float = 0.05,
    model: LogisticModel | None = None,
    bank0: DetectorBank | None = None,
    trees: list | None = None,
    include_implicit: bool = True,
    max_restarts: int = 3,
) -> DefenseResult:
    """Projected gradient descent on the surrogate with the seed held fixed.

    The default start screens the assumed seed (its threshold low, the
    rest at 0.5): the fixed-seed problem grants the defender knowledge of
    the attacked node, and a fully uniform start is a tie point of the
    attacker's detection constraints where the malicious gradient
    vanishes.  Each threshold update re-solves the attacker for every
    malicious training instance (warm-started) before the next gradient.
    Iterates are projected onto [delta, 1-delta]^N; the best iterate by
    surrogate value is returned.  A diverging run restarts with a halved
    base step.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if trees is None:
        trees = all_trees(network)
    if bank0 is None:
        if model is None:
            raise ValueError("either bank0 or model is required")
        theta0 = np.full(network.n_nodes, 0.5)
        theta0[assumed_seed] = SEED_SCREEN_THETA
        bank0 = DetectorBank(model=model, thresholds=theta0)
    mal_X = train_set.malicious()
    ben_X = train_set.benign()
    cache = _BenignCache(trees, ben_X, bank0.model)
    tree = trees[assumed_seed]
    lo, hi = THETA_CLAMP, 1.0 - THETA_CLAMP
    # the feasibility floor of each instance does not depend on thresholds
    floors = [
        _attacker.evasion_floor(bank0.model.weights, x, epsilon) for x in mal_X
    ]

    for restart in range(max_restarts + 1):
        bank = bank0
        best_theta = bank.thresholds.copy()
        best_obj = np.inf
        trajectory = []
        payloads = [None] * len(mal_X)
        diverged = False
        for t in range(iters + 1):
            attacked = []
            for i, x in enumerate(mal_X):
                item = solve_attacked_payload(
                    tree, bank, x, epsilon, z0=payloads[i], floor=floors[i]
                )
                payloads[i] = item.z
                attacked.append(item)
            obj = surrogate_defender_objective(
                bank, trees, ben_X, attacked, assumed_seed, alpha, benign_cache=cache
            )
            if not np.isfinite(obj) or abs(obj) > DIVERGENCE_GUARD:
                diverged = True
                break
            if obj < best_obj:
                best_obj = obj
                best_theta = bank.thresholds.copy()
            if t == iters:
                break
            step = beta0 / np.sqrt(t + 1.0)
            trajectory.append((obj, step))
            g = grad_theta(
                bank, trees, ben_X, attacked, assumed_seed, alpha, epsilon,
                include_implicit=include_implicit, benign_cache=cache,
            )
            # infinity-norm normalization puts the step schedule in
            # threshold units; raw ramp gradients span orders of magnitude
            g_inf = float(np.abs(g).max(initial=0.0))
            if g_inf > 0.0:
                g = g / g_inf
            bank = bank.with_thresholds(np.clip(bank.thresholds - step * g, lo, hi))
        if not diverged:
            return DefenseResult(
                thresholds=best_theta,
                surrogate_value=best_obj,
                trajectory=trajectory,
                assumed_seed=assumed_seed,
            )
        beta0 *= 0.5
    return DefenseResult(
        thresholds=best_theta,
        surrogate_value=best_obj,
        trajectory=trajectory,
        assumed_seed=assumed_seed,
    )


def sse_defense(
    network: Network,
    train_set: LabeledDataset,
    alpha: float,
    epsilon: float,
    model: LogisticModel,
    T: float = 1.0,
    n_sims: int = 1000,
    seed: int = 0,
    iters: int = 50,
    beta0: float = 0.05,
    trees: list | None = None,
    include_implicit: bool = True,
):
    """Equilibrium heuristic: per-seed descent, then pick by true utility.

    For every candidate seed the fixed-seed defense is computed, the
    attacker best-responds over all seeds and payloads, and the bank is
    scored with the Monte Carlo utility (shared evaluation streams across
    candidates so the ranking is not noise-dominated).  Returns the best
    bank and a per-candidate report; ties break to the lowest node id.
    """
    from .harness import defender_utility  # deferred: harness imports this module

    if trees is None:
        trees = all_trees(network)
    mal_X = train_set.malicious()
    ben_X = train_set.benign()
    report = []
    best = None
    for j in range(network.n_nodes):
        res = pgd_defense(
            network, train_set, j, alpha, epsilon,
            iters=iters, beta0=beta0, model=model, trees=trees,
            include_implicit=include_implicit,
        )
        bank_j = DetectorBank(model=model, thresholds=res.thresholds)
        plans = attack_dataset(network, bank_j, mal_X, epsilon, trees=trees)
        row = defender_utility(network, bank_j, ben_X, plans, alpha, T, n_sims, seed)
        report.append(
            {
                "node": j,
                "utility": row.u_d,
                "benign_term": row.benign_term,
                "malicious_term": row.malicious_term,
                "surrogate": res.surrogate_value,
            }
        )
        if best is None or row.u_d > best[1]:
            best = (bank_j, row.u_d, j)
    return best[0], report


def save_defense_result(result: DefenseResult, thresholds_path, trajectory_path):
    from .detector import save_thresholds

    save_thresholds(result.thresholds, thresholds_path)
    with open(trajectory_path, "w") as fh:
        fh.write("iter,objective,step\n")
        for i, (obj, step) in enumerate(result.trajectory):
            fh.write(f"{i},{float(obj)!r},{float(step)!r}\n")
