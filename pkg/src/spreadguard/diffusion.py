"""Content-dependent continuous-time cascades and the layered expansion.

Edge transmission delays are Rayleigh with rate a = w_e . x, so hotter
content (larger inner products) travels faster.  A cascade is a shortest
path tree over one sampled delay per edge; a node is affected when its
arrival time is within the window T and its detector passes the content.
A node whose detector flags the content is blocked: never affected and
never retransmitting.

Monte Carlo influence estimates draw per-sample delay vectors keyed by
(seed, sample index), so results are reproducible and independent of any
parallel scheduling of samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from .detector import DetectorBank
from .netgen import Network


class DegenerateContentError(ValueError):
    """Raised when an edge rate w_e . x is not strictly positive."""


def sample_edge_time(w_e: np.ndarray, x: np.ndarray, rng) -> float:
    """Inverse-CDF draw of a Rayleigh delay with rate a = w_e . x > 0."""
    a = float(np.dot(w_e, x))
    if a <= 0.0:
        raise DegenerateContentError(f"edge rate w.x must be > 0, got {a}")
    u = rng.random()
    return float(np.sqrt(-2.0 * np.log1p(-u) / a))


def edge_rates(network: Network, x: np.ndarray) -> np.ndarray:
    """Per-edge Rayleigh rates a_e = w_e . x (nonnegative for x >= 0)."""
    x = np.asarray(x, dtype=np.float64)
    if network.n_features == 0:
        raise ValueError("network has no edge parameters; call sample_edge_params first")
    if x.shape != (network.n_features,):
        raise ValueError(f"content dimension {x.shape} != ({network.n_features},)")
    return network.weights @ x


def _times_from_uniforms(u: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """Delay matrix from uniforms; zero-rate edges never transmit (inf)."""
    with np.errstate(divide="ignore"):
        inv = np.where(rates > 0.0, 1.0 / rates, np.inf)
    return np.sqrt(-2.0 * np.log1p(-u) * inv)


class _CsrTemplate:
    """Reusable CSR scaffold for one network; per-sample only the data changes."""

    def __init__(self, network: Network):
        n, e = network.n_nodes, network.n_edges
        src = np.concatenate([network.edges[:, 0], network.edges[:, 1]])
        dst = np.concatenate([network.edges[:, 1], network.edges[:, 0]])
        entry_edge = np.concatenate([np.arange(e), np.arange(e)])
        order = np.lexsort((dst, src))
        self.entry_edge = entry_edge[order]
        self.entry_src = src[order]
        self.entry_dst = dst[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, self.entry_src + 1, 1)
        self.matrix = sp.csr_matrix(
            (np.ones(2 * e), self.entry_dst, np.cumsum(indptr)), shape=(n, n)
        )

    def distances(self, times: np.ndarray, blocked: np.ndarray, sources, limit: float):
        data = times[self.entry_edge]
        if blocked.any():
            data[blocked[self.entry_src] | blocked[self.entry_dst]] = np.inf
        self.matrix.data = data
        return dijkstra(self.matrix, directed=True, indices=sources, limit=limit)


_TEMPLATES: dict = {}


def _template(network: Network) -> _CsrTemplate:
    key = id(network)
    tpl = _TEMPLATES.get(key)
    if tpl is None or tpl.matrix.shape[0] != network.n_nodes:
        tpl = _CsrTemplate(network)
        _TEMPLATES[key] = tpl
        if len(_TEMPLATES) > 64:
            _TEMPLATES.pop(next(iter(_TEMPLATES)))
    return tpl


@dataclass
class CascadeSample:
    """One simulated propagation: arrival times (inf = never) and who got hit."""

    seed: int
    arrival_time: np.ndarray
    affected: np.ndarray
    blocked: np.ndarray


def simulate_cascade(
    network: Network,
    bank: DetectorBank,
    seed_node: int,
    x: np.ndarray,
    T: float,
    rng,
) -> CascadeSample:
    """Single cascade: Dijkstra over freshly sampled delays with blocking.

    Blocked nodes (detector flags x) are excluded from the affected set and
    relay nothing; a flagged seed yields an empty cascade.
    """
    rates = edge_rates(network, x)
    blocked = ~bank.passes_mask(x)
    u = rng.random(network.n_edges)
    times = _times_from_uniforms(u, rates)
    arrival = np.full(network.n_nodes, np.inf)
    if blocked[seed_node]:
        return CascadeSample(seed_node, arrival, np.array([], dtype=np.int64), blocked)
    dist = _template(network).distances(times, blocked, [seed_node], limit=T)[0]
    arrival = dist
    affected = np.where((dist <= T) & ~blocked)[0]
    return CascadeSample(seed_node, arrival, affected, blocked)


def estimate_influence(
    network: Network,
    bank: DetectorBank,
    seed_node: int,
    x: np.ndarray,
    T: float,
    n_samples: int,
    seed: int,
) -> float:
    """Monte Carlo influence: mean affected count over independent cascades."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rates = edge_rates(network, x)
    blocked = ~bank.passes_mask(x)
    if blocked[seed_node]:
        return 0.0
    u = np.random.default_rng(seed).random((n_samples, network.n_edges))
    tpl = _template(network)
    total = 0
    for s in range(n_samples):
        times = _times_from_uniforms(u[s], rates)
        dist = tpl.distances(times, blocked, [seed_node], limit=T)[0]
        total += int(((dist <= T) & ~blocked).sum())
    return total / n_samples


def estimate_influence_profile(
    network: Network,
    bank: DetectorBank,
    x: np.ndarray,
    T: float,
    n_samples: int,
    seed: int,
) -> np.ndarray:
    """Per-origin influence vector, sharing delay samples across origins.

    Each sample's delay draw is reused for every origin (one multi-source
    shortest-path pass), which keeps each entry an unbiased estimate of
    that origin's influence at a fraction of the per-origin cost.  Blocked
    origins have influence exactly 0.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rates = edge_rates(network, x)
    blocked = ~bank.passes_mask(x)
    out = np.zeros(network.n_nodes)
    sources = np.where(~blocked)[0]
    if len(sources) == 0:
        return out
    u = np.random.default_rng(seed).random((n_samples, network.n_edges))
    tpl = _template(network)
    counts = np.zeros(len(sources))
    for s in range(n_samples):
        times = _times_from_uniforms(u[s], rates)
        dist = tpl.distances(times, blocked, sources, limit=T)
        counts += ((dist <= T) & ~blocked[None, :]).sum(axis=1)
    out[sources] = counts / n_samples
    return out


@dataclass
class PropagationTree:
    """BFS layering from a root with stacked per-layer edge parameters.

    layers[0] == [root]; for l >= 1 each layer-l node contributes one row
    to A[l-1] (its BFS parent edge parameters), rows ordered by node id.
    k holds the per-layer decay coefficients, k_l = exp(-(l-1)).
    """

    root: int
    layers: list
    layer_edges: list
    A: list
    k: np.ndarray

    nodes_flat: np.ndarray = field(default=None, repr=False)
    k_flat: np.ndarray = field(default=None, repr=False)
    A_flat: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.nodes_flat is None:
            if self.layers[1:]:
                self.nodes_flat = np.concatenate(self.layers[1:])
                self.k_flat = np.repeat(self.k, [len(l) for l in self.layers[1:]])
                self.A_flat = np.vstack(self.A) if self.A else np.zeros((0, 0))
            else:
                self.nodes_flat = np.array([], dtype=np.int64)
                self.k_flat = np.array([])
                self.A_flat = np.zeros((0, 0))

    def direction(self) -> np.ndarray:
        """Objective direction sum_l k_l A_l^T 1 for the evasion program."""
        if self.A_flat.size == 0:
            n = self.A_flat.shape[1] if self.A_flat.ndim == 2 else 0
            return np.zeros(n)
        return self.A_flat.T @ self.k_flat

    @property
    def n_layers(self) -> int:
        return len(self.layers) - 1


def build_tree(network: Network, root: int) -> PropagationTree:
    """BFS layers from the root; each node keeps its lowest-id parent edge."""
    if not 0 <= root < network.n_nodes:
        raise ValueError(f"root {root} outside network")
    adj = network.adjacency()
    eidx = network.edge_index()
    level = np.full(network.n_nodes, -1, dtype=np.int64)
    level[root] = 0
    layers = [np.array([root], dtype=np.int64)]
    layer_edges, A = [], []
    frontier = [root]
    l = 0
    while frontier:
        l += 1
        nxt = set()
        for u in frontier:
            for v in adj[u]:
                if level[v] < 0:
                    nxt.add(int(v))
        if not nxt:
            break
        nodes = np.array(sorted(nxt), dtype=np.int64)
        level[nodes] = l
        edges, rows = [], []
        for v in nodes:
            parents = [int(u) for u in adj[v] if level[u] == l - 1]
            p = min(parents)
            edges.append((p, int(v)))
            rows.append(network.weights[eidx[(min(p, v), max(p, v))]])
        layers.append(nodes)
        layer_edges.append(edges)
        A.append(np.array(rows).reshape(len(nodes), network.n_features))
        frontier = list(nodes)
    k = np.exp(-np.arange(len(layers) - 1, dtype=np.float64))
    tree = PropagationTree(root=root, layers=layers, layer_edges=layer_edges, A=A, k=k)
    if tree.A_flat.size == 0:
        tree.A_flat = np.zeros((0, network.n_features))
    return tree


def all_trees(network: Network) -> list:
    return [build_tree(network, r) for r in range(network.n_nodes)]


def surrogate_spread(tree: PropagationTree, z: np.ndarray) -> float:
    """Layer-weighted mass sum_l k_l 1^T A_l z."""
    z = np.asarray(z, dtype=np.float64)
    if np.min(z, initial=0.0) < -1e-9:
        raise ValueError("z must be nonnegative")
    if tree.A_flat.size == 0:
        return 0.0
    return float(tree.k_flat @ (tree.A_flat @ z))


def dump_cascade_trace(samples, path):
    """Debug CSV of cascades: sample,node,arrival,blocked."""
    with open(path, "w") as fh:
        fh.write("sample,node,arrival,blocked\n")
        for s, cas in enumerate(samples):
            for node in range(len(cas.arrival_time)):
                fh.write(
                    f"{s},{node},{cas.arrival_time[node]!r},{int(cas.blocked[node])}\n"
                )
