import numpy as np
import pytest

from spreadguard import dataset, detector, netgen


@pytest.fixture(scope="session")
def corpus():
    return dataset.generate_corpus(seed=73)


@pytest.fixture(scope="session")
def splits(corpus):
    base, train, test = dataset.split(corpus, seed=11)
    base_n, stats = dataset.normalize_minmax(base)
    train_n = dataset.apply_normalization(train, stats)
    test_n = dataset.apply_normalization(test, stats)
    return base_n, train_n, test_n, stats


@pytest.fixture(scope="session")
def trained_model(splits):
    base_n = splits[0]
    model, history = dataset.train_logistic(base_n)
    return model, history


def single_edge_network(rate_weight=1.0):
    return netgen.Network(
        n_nodes=2,
        edges=np.array([[0, 1]]),
        weights=np.array([[rate_weight]]),
        n_features=1,
    )


def open_bank(n_nodes, n_features=1):
    model = dataset.LogisticModel(weights=np.zeros(n_features), bias=0.0)
    return detector.DetectorBank(model=model, thresholds=np.full(n_nodes, 1 - 1e-4))


def random_instance(seed, n_nodes=6, n_feat=3, theta_lo=0.25, theta_hi=0.75):
    """Small random network + detector bank + content point."""
    r = np.random.default_rng(seed)
    topo = netgen.generate_ws(n_nodes, 2 if n_nodes < 8 else 4, 0.3, seed)
    net = netgen.sample_edge_params(topo, n_feat, seed + 1)
    model = dataset.LogisticModel(weights=r.normal(0, 2.0, n_feat), bias=float(r.normal(0, 0.5)))
    bank = detector.DetectorBank(model=model, thresholds=r.uniform(theta_lo, theta_hi, n_nodes))
    x = r.uniform(0.1, 0.9, n_feat)
    return net, bank, x


def binding_instance(seed, n_nodes=6, n_feat=3, eps=0.02):
    """Instance whose evasion optimum has the detection halfspace active."""
    r = np.random.default_rng(seed)
    topo = netgen.generate_ws(n_nodes, 2 if n_nodes < 8 else 4, 0.3, seed)
    net = netgen.sample_edge_params(topo, n_feat, seed + 1)
    w = r.normal(0, 2.0, n_feat)
    b = float(r.normal(0, 0.5))
    model = dataset.LogisticModel(weights=w, bias=b)
    x = r.uniform(0.1, 0.9, n_feat)
    raw_x = float(w @ x + b)
    margin = 0.4 * np.sqrt(eps) * np.linalg.norm(w)
    theta_min = float(np.clip(1 / (1 + np.exp(-(raw_x - margin))), 0.02, 0.93))
    thetas = r.uniform(min(theta_min + 0.05, 0.94), 0.97, n_nodes)
    thetas[int(r.integers(n_nodes))] = theta_min
    bank = detector.DetectorBank(model=model, thresholds=thetas)
    return net, bank, x, eps
