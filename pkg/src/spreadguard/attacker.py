"""Evasion attack: per-seed payload optimization and joint seed choice.

For a candidate seed the attacker maximizes the layer-weighted spread
direction a . z over the feasible set

    F = { ||z - x||_2^2 <= eps } ∩ { raw(z) <= min_k logit(theta_k) } ∩ { z >= 0 }.

Because every node shares the scoring weights, the per-node detection
constraints collapse to the single tightest halfspace, and feasibility of
F reduces to an exact scalar test (the score floor over ball ∩ orthant
versus the tightest logit).  The solver is projected gradient ascent with
Dykstra's alternating projections onto the intersection, with closed-form
shortcuts for the pure-ball and ball-plus-halfspace geometries and an
active-set polish that lands on the exact optimum in the generic case.
If F is empty the attacker falls back to the unmodified payload.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .detector import DetectorBank
from .diffusion import PropagationTree, all_trees
from .netgen import Network

FEAS_TOL = 1e-8
ACTIVE_TOL = 1e-7
DEFAULT_MAX_ITERS = 500
MOVE_TOL = 1e-9
# returned payloads sit strictly inside the detection halfspace so the
# true (inclusive) pass rule is met even after float round-off
HALFSPACE_SAFETY = 1e-9


@dataclass
class AttackPlan:
    """Chosen seed and payload; feasible=False means the original x is sent."""

    seed: int
    payload: np.ndarray
    utility: float
    feasible: bool


def detection_halfspace(bank: DetectorBank):
    """The collapsed constraint w . z <= c implied by all node thresholds."""
    w = bank.model.weights
    c = float(bank.logits().min() - bank.model.bias)
    return w, c


def _dykstra(y0, x, rho, w, c, max_passes=200, tol=1e-11):
    """Project y0 onto ball(x, rho) ∩ {w.z <= c} ∩ {z >= 0}."""
    wn2 = float(w @ w)
    rho2 = rho * rho
    tol2 = tol * tol
    z = y0.copy()
    p_ball = np.zeros_like(z)
    p_hs = np.zeros_like(z)
    p_orth = np.zeros_like(z)
    for _ in range(max_passes):
        z_prev = z
        y = z + p_ball
        d = y - x
        nd2 = float(d @ d)
        z = y if nd2 <= rho2 else x + d * (rho / np.sqrt(nd2))
        p_ball = y - z
        y = z + p_hs
        v = float(w @ y) - c
        z = y if (v <= 0.0 or wn2 == 0.0) else y - (v / wn2) * w
        p_hs = y - z
        y = z + p_orth
        z = np.maximum(y, 0.0)
        p_orth = y - z
        move = z - z_prev
        if float(move @ move) < tol2:
            break
    return z


def evasion_floor(w: np.ndarray, x: np.ndarray, epsilon: float):
    """Exact minimum of w . z over ball(x, sqrt(eps)) ∩ {z >= 0}.

    The minimizer traces the soft-threshold path z(t) = max(0, x - t*w)
    (the KKT solution family), whose distance to x grows monotonically in
    t, so the ball-constrained minimum is found by bisection on t.
    Threshold-independent: the feasible set F is nonempty exactly when
    this floor is at or below the tightest detection logit.

    Returns (min_value, z_min); z_min is a feasible point of
    ball ∩ orthant attaining the floor, or None when ball ∩ orthant = {}.
    """
    x = np.asarray(x, dtype=np.float64)

    def z_of(t):
        return np.maximum(x - t * w, 0.0)

    def dist2(t):
        d = z_of(t) - x
        return float(d @ d)

    if dist2(0.0) > epsilon + 1e-15:
        return np.inf, None  # the ball misses the orthant entirely
    t_hi = 1.0
    for _ in range(80):
        if dist2(t_hi) >= epsilon or t_hi > 1e12:
            break
        t_hi *= 4.0
    if dist2(t_hi) < epsilon:
        z = z_of(t_hi)  # path stays inside the ball: floor at the path end
        return float(w @ z), z
    t_lo = 0.0
    for _ in range(60):
        t_mid = 0.5 * (t_lo + t_hi)
        if dist2(t_mid) > epsilon:
            t_hi = t_mid
        else:
            t_lo = t_mid
    z = z_of(t_lo)
    return float(w @ z), z


def _violations(z, x, eps, w, c):
    budget = float(z @ z - 2 * (z @ x) + x @ x) - eps
    hs = float(w @ z) - c
    orth = -float(z.min(initial=0.0))
    return budget, hs, orth


def _snap_feasible(z, x, rho, w, c):
    """Nudge a near-feasible iterate onto F without measurable objective change."""
    wn2 = float(w @ w)
    z = np.maximum(z, 0.0)
    d = z - x
    nd = np.linalg.norm(d)
    if nd > rho:
        z = x + d * (rho / nd)
    if wn2 > 0.0:
        v = float(w @ z) - (c - HALFSPACE_SAFETY)
        if v > 0.0:
            z = z - (v / wn2) * w
    return np.where(z < 0.0, np.where(z > -1e-12, 0.0, z), z)


def _polish(z, x, eps, a, w, c):
    """Active-set refinement: resolve the tight constraints exactly.

    Iterates on the guessed active set (orthant coordinates plus
    optionally the halfspace, ball always active) and solves the reduced
    equality-constrained maximization in closed form.  Returns None when
    no clean refinement exists.
    """
    rho = np.sqrt(eps)
    wn2 = float(w @ w)
    on_hs = wn2 > 0.0 and abs(float(w @ z) - c) <= 1e-6 * (1.0 + abs(c))
    zero_set = z <= 1e-8
    for _ in range(10):
        free = ~zero_set
        if not free.any():
            return None
        rho2_f = eps - float(x[zero_set] @ x[zero_set])
        if rho2_f <= 1e-14:
            return None
        rho_f = np.sqrt(rho2_f)
        a_f, w_f, x_f = a[free], w[free], x[free]
        if on_hs:
            beta = c - float(w_f @ x_f)
            wn2_f = float(w_f @ w_f)
            if wn2_f <= 0.0 or beta * beta / wn2_f > rho2_f:
                return None
            a_perp = a_f - (float(a_f @ w_f) / wn2_f) * w_f
            na = np.linalg.norm(a_perp)
            rad = np.sqrt(max(rho2_f - beta * beta / wn2_f, 0.0))
            d_f = (beta / wn2_f) * w_f
            if na > 1e-12 and rad > 0.0:
                d_f = d_f + (rad / na) * a_perp
        else:
            na = np.linalg.norm(a_f)
            if na <= 1e-12:
                return None
            d_f = (rho_f / na) * a_f
        cand = np.zeros_like(z)
        cand[free] = x_f + d_f
        neg = cand < -1e-12
        if neg.any():
            zero_set = zero_set | neg
            continue
        cand = np.maximum(cand, 0.0)
        budget, hs, orth = _violations(cand, x, eps, w, c)
        if budget <= 1e-9 and (hs <= 1e-9 or wn2 == 0.0) and orth <= 1e-12:
            return cand
        if hs > 1e-9 and not on_hs:
            on_hs = True
            continue
        return None
    return None


def evade_for_node(
    tree: PropagationTree,
    bank: DetectorBank,
    x: np.ndarray,
    epsilon: float,
    max_iters: int = DEFAULT_MAX_ITERS,
    move_tol: float = MOVE_TOL,
    z0: np.ndarray | None = None,
    floor=None,
):
    """Solve the per-seed evasion program; returns (z, objective, feasible).

    Feasibility is decided exactly: F is nonempty iff the orthant/ball
    floor of the score (see evasion_floor) reaches the tightest detection
    logit.  Infeasibility returns the unmodified payload with its
    objective value and False.  `floor` may carry a precomputed
    evasion_floor result (it does not depend on the thresholds).
    """
    x = np.asarray(x, dtype=np.float64)
    if not (np.isfinite(x).all() and np.isfinite(epsilon) and epsilon > 0):
        raise ValueError("x must be finite and epsilon > 0")
    a = tree.direction()
    w, c = detection_halfspace(bank)
    rho = np.sqrt(epsilon)

    if floor is None:
        floor = evasion_floor(w, x, epsilon)
    min_val, z_min = floor
    if not (min_val <= c + FEAS_TOL):
        return x.copy(), float(a @ x), False

    na = np.linalg.norm(a)
    if na == 0.0:
        z_f = x if (float(w @ x) <= c and x.min(initial=0.0) >= 0.0) else z_min
        return _snap_feasible(z_f.copy(), x, rho, w, c), 0.0, True

    # Ball-only optimum; exact whenever it already satisfies the other sets.
    z1 = x + (rho / na) * a
    if float(w @ z1) <= c and z1.min() >= 0.0:
        z1 = _snap_feasible(z1, x, rho, w, c)
        return z1, float(a @ z1), True

    # Ball + halfspace optimum in closed form, valid if the orthant stays slack.
    wn2 = float(w @ w)
    if wn2 > 0.0:
        beta = c - float(w @ x)
        disc = epsilon - beta * beta / wn2
        if disc > 0.0:
            a_perp = a - (float(a @ w) / wn2) * w
            nap = np.linalg.norm(a_perp)
            z2 = x + (beta / wn2) * w
            if nap > 1e-12:
                z2 = z2 + (np.sqrt(disc) / nap) * a_perp
            if z2.min() >= 0.0:
                lam = nap / (2.0 * np.sqrt(disc)) if nap > 1e-12 else 0.0
                mu = (float(a @ w) - 2.0 * lam * beta) / wn2
                if mu >= -1e-12:
                    z2 = _snap_feasible(z2, x, rho, w, c)
                    return z2, float(a @ z2), True

    if z0 is not None:
        z = _snap_feasible(np.asarray(z0, dtype=np.float64), x, rho, w, c)
    elif float(w @ x) <= c and x.min(initial=0.0) >= 0.0:
        z = x.copy()
    else:
        z = _snap_feasible(z_min.copy(), x, rho, w, c)
    step = 1.0 / na
    best_z, best_obj = z.copy(), float(a @ z)
    for _ in range(max_iters):
        z_new = _dykstra(z + step * a, x, rho, w, c)
        obj = float(a @ z_new)
        if obj > best_obj:
            best_obj, best_z = obj, z_new.copy()
        if np.linalg.norm(z_new - z) <= move_tol:
            z = z_new
            break
        z = z_new

    polished = _polish(best_z, x, epsilon, a, w, c)
    if polished is not None and float(a @ polished) >= best_obj - 1e-12:
        best_z = polished
    best_z = _snap_feasible(best_z, x, rho, w, c)
    return best_z, float(a @ best_z), True


def recover_multipliers(z, x, epsilon, a, w, c):
    """Lagrange multipliers (lam, mu, eta) at z by nonnegative least squares.

    Stationarity of the evasion program reads a = 2*lam*(z - x) + mu*w - eta
    with eta supported on the active orthant coordinates.  Returns the
    multipliers together with the stationarity residual norm.
    """
    n = len(z)
    budget, hs, _ = _violations(z, x, epsilon, w, c)
    ball_active = budget >= -1e-7 * max(epsilon, 1e-12)
    hs_active = float(w @ w) > 0.0 and abs(hs) <= ACTIVE_TOL * (1.0 + abs(c))
    orth_active = np.where(z <= 1e-9)[0]
    cols = []
    if ball_active:
        cols.append(2.0 * (z - x))
    if hs_active:
        cols.append(w)
    for i in orth_active:
        e = np.zeros(n)
        e[i] = -1.0
        cols.append(e)
    lam = mu = 0.0
    eta = np.zeros(n)
    if not cols:
        return lam, mu, eta, float(np.linalg.norm(a))
    M = np.column_stack(cols)
    v, resid = nnls(M, a)
    k = 0
    if ball_active:
        lam = float(v[k])
        k += 1
    if hs_active:
        mu = float(v[k])
        k += 1
    eta[orth_active] = v[k:]
    return lam, mu, eta, float(resid)


def kkt_residual(z, x, epsilon, a, w, c):
    """Max of stationarity and complementary-slackness residuals at z."""
    lam, mu, eta, stat = recover_multipliers(z, x, epsilon, a, w, c)
    budget, hs, _ = _violations(z, x, epsilon, w, c)
    comp = max(abs(lam * budget), abs(mu * hs) if mu else 0.0, float(np.abs(eta * z).max(initial=0.0)))
    return max(stat, comp)


def optimal_attack(
    network: Network,
    bank: DetectorBank,
    x: np.ndarray,
    epsilon: float,
    trees: list | None = None,
) -> AttackPlan:
    """Best (seed, payload) pair: solve the evasion program for every seed.

    Ranks candidate seeds by the per-seed optimal objective; ties break to
    the lowest node id.  The feasible set is seed-independent, so
    feasibility is decided once.
    """
    if trees is None:
        trees = all_trees(network)
    x = np.asarray(x, dtype=np.float64)
    w, _ = detection_halfspace(bank)
    floor = evasion_floor(w, x, epsilon)

    best = None
    for i, tree in enumerate(trees):
        z, obj, feas = evade_for_node(tree, bank, x, epsilon, floor=floor)
        if best is None or obj > best.utility:
            best = AttackPlan(seed=i, payload=z, utility=obj, feasible=feas)
    return best


def attack_dataset(
    network: Network,
    bank: DetectorBank,
    malicious_X: np.ndarray,
    epsilon: float,
    trees: list | None = None,
) -> list:
    """Independent optimal attack for each malicious instance (row order kept)."""
    if trees is None:
        trees = all_trees(network)
    return [optimal_attack(network, bank, x, epsilon, trees=trees) for x in malicious_X]


def export_attacks_csv(plans, malicious_X, path):
    """CSV rows: instance_id,seed,feasible,objective,l2sq_displacement."""
    with open(path, "w") as fh:
        fh.write("instance_id,seed,feasible,objective,l2sq_displacement\n")
        for i, (plan, x) in enumerate(zip(plans, malicious_X)):
            d = plan.payload - x
            fh.write(
                f"{i},{plan.seed},{int(plan.feasible)},{plan.utility!r},{float(d @ d)!r}\n"
            )
