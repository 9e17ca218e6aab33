"""Per-node detector bank: shared logistic scorer, heterogeneous thresholds.

Classification at node i is benign iff sigmoid(raw(x)) <= theta_i,
equivalently raw(x) <= logit(theta_i); the boundary counts as benign.
The logit-margin surrogate logit(theta) - raw(x) stands in for the 0-1
pass indicator inside gradients and solver constraints; Monte Carlo
influence evaluation always uses the true indicator.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import BENIGN, MALICIOUS, LogisticModel

THETA_CLAMP = 1e-4


def clamp_thresholds(thresholds: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(thresholds, dtype=np.float64), THETA_CLAMP, 1.0 - THETA_CLAMP)


def logit(theta):
    theta = np.asarray(theta, dtype=np.float64)
    return np.log(theta / (1.0 - theta))


@dataclass
class DetectorBank:
    """Shared model plus one detection threshold per node (clamped away from {0,1})."""

    model: LogisticModel
    thresholds: np.ndarray

    def __post_init__(self):
        self.thresholds = clamp_thresholds(self.thresholds)

    @property
    def n_nodes(self) -> int:
        return len(self.thresholds)

    def logits(self) -> np.ndarray:
        return logit(self.thresholds)

    def with_thresholds(self, thresholds: np.ndarray) -> "DetectorBank":
        return replace(self, thresholds=clamp_thresholds(thresholds))

    def passes_mask(self, x: np.ndarray) -> np.ndarray:
        """Boolean per node: True where x is classified benign (passes)."""
        return self.model.raw(x) <= self.logits()


def uniform_bank(model: LogisticModel, n_nodes: int, theta: float = 0.5) -> DetectorBank:
    return DetectorBank(model=model, thresholds=np.full(n_nodes, theta))


def classify(bank: DetectorBank, node_id: int, x: np.ndarray) -> str:
    """BENIGN iff score(x) <= theta at this node (inclusive boundary)."""
    if bank.model.raw(x) <= logit(bank.thresholds[node_id]):
        return BENIGN
    return MALICIOUS


def surrogate_c(bank: DetectorBank, layer_nodes, x: np.ndarray) -> np.ndarray:
    """Per-layer pass margins: entry i = logit(theta_{l_i}) - raw(x)."""
    nodes = np.asarray(layer_nodes, dtype=np.int64)
    return logit(bank.thresholds[nodes]) - bank.model.raw(x)


def logit_slope(theta):
    """d logit(theta) / d theta = 1 / (theta - theta^2)."""
    theta = np.asarray(theta, dtype=np.float64)
    return 1.0 / (theta - theta * theta)


def dc_dtheta(bank: DetectorBank, layer_nodes) -> np.ndarray:
    """Diagonal Jacobian of surrogate_c with respect to the layer thresholds."""
    nodes = np.asarray(layer_nodes, dtype=np.int64)
    return np.diag(logit_slope(bank.thresholds[nodes]))


def dind_dtheta(bank: DetectorBank, node_id: int) -> np.ndarray:
    """Gradient of the node's surrogate indicator over the full threshold vector."""
    out = np.zeros(bank.n_nodes)
    out[node_id] = logit_slope(bank.thresholds[node_id])
    return out


def save_thresholds(bank_or_thresholds, path):
    thresholds = getattr(bank_or_thresholds, "thresholds", bank_or_thresholds)
    with open(path, "w") as fh:
        for i, t in enumerate(thresholds):
            fh.write(f"{i} {float(t)!r}\n")


def load_thresholds(path) -> np.ndarray:
    vals = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected 'node theta'")
            vals[int(parts[0])] = float(parts[1])
    return np.array([vals[i] for i in range(len(vals))])
