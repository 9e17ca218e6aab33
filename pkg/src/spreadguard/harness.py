"""Experiment harness: configuration, the true Monte Carlo utility, the
commit-then-best-respond evaluation protocol, and figure-data sweeps.

The utility of a deployed bank is

    U_d = alpha * sum_{x benign} sum_{i in V} sigma(i, Theta, x)
        - (1 - alpha) * sum_{x malicious} sigma(s_x, Theta, z_x),

with (s_x, z_x) the attacker's best response.  Benign per-origin sums are
computed with delay samples shared across origins (one multi-source
shortest-path pass per sample), which is exact in expectation for every
origin and far cheaper than independent per-origin runs.

All randomness is derived from the master seed through named streams, so
repeated runs produce byte-identical CSV outputs regardless of worker
count.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from .attacker import attack_dataset
from .baselines import baseline_uniform, personalized_single_threshold, retraining_defense
from .dataset import (
    LabeledDataset,
    LogisticModel,
    SPLIT_SIZES,
    apply_normalization,
    generate_corpus,
    load_spambase,
    normalize_minmax,
    split,
    train_logistic,
)
from .defender import sse_defense
from .detector import DetectorBank
from .diffusion import all_trees, estimate_influence, estimate_influence_profile
from .netgen import (
    WS_CALIBRATED_K,
    WS_CALIBRATED_P,
    Network,
    generate_ba,
    generate_ws,
    sample_edge_params,
)

STRATEGIES = ("baseline", "retrain", "single", "sse")


@dataclass
class ExperimentConfig:
    """Everything a protocol run needs; parsed from key=value config files."""

    families: list = field(default_factory=lambda: ["ba", "ws"])
    n_nodes: int = 64
    ba_exponent: float = 2.1
    ws_k: int = WS_CALIBRATED_K
    ws_p: float = WS_CALIBRATED_P
    topology_seeds: list = field(default_factory=lambda: list(range(10)))
    data_csv: str | None = None
    corpus_seed: int = 73
    split_seed: int = 11
    alpha: float = 0.5
    T: float = 1.0
    epsilons: list = field(default_factory=lambda: [0.001, 0.005, 0.01])
    n_simulations: int = 1000
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    master_seed: int = 0
    n_eval_mal: int = 20
    n_eval_ben: int = 20
    n_fit_mal: int = 20
    n_fit_ben: int = 20
    pgd_iters: int = 50
    pgd_beta0: float = 0.05
    sse_eval_sims: int = 1000
    retrain_max_rounds: int = 10
    retrain_subset: int = 50
    train_epochs: int = 2000
    train_l2: float = 1e-4
    workers: int = 1

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.T <= 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if any(e <= 0 for e in self.epsilons):
            raise ValueError(f"all epsilons must be positive, got {self.epsilons}")
        if self.n_simulations < 1:
            raise ValueError("n_simulations must be >= 1")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise ValueError(f"unknown strategies {sorted(unknown)}; valid: {STRATEGIES}")
        for fam in self.families:
            if fam not in ("ba", "ws"):
                raise ValueError(f"unknown family {fam!r}; valid: ba, ws")
        return self

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        cfg = cls()
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"line {lineno}: expected key=value")
                key, val = (s.strip() for s in line.split("=", 1))
                cfg.set_key(key, val, lineno)
        return cfg.validate()

    def set_key(self, key: str, val: str, lineno: int = 0):
        spec = {f.name: f.type for f in fields(self)}
        if key not in spec:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        current = getattr(self, key)
        try:
            if isinstance(current, list):
                items = [v for v in val.replace(",", " ").split() if v]
                if key in ("families", "strategies"):
                    setattr(self, key, items)
                elif key == "topology_seeds":
                    setattr(self, key, [int(v) for v in items])
                else:
                    setattr(self, key, [float(v) for v in items])
            elif isinstance(current, bool):
                setattr(self, key, val.lower() in ("1", "true", "yes"))
            elif isinstance(current, int):
                setattr(self, key, int(val))
            elif isinstance(current, float):
                setattr(self, key, float(val))
            else:
                setattr(self, key, None if val.lower() == "none" else val)
        except ValueError:
            raise ValueError(f"line {lineno}: bad value {val!r} for {key}") from None


def derive_seed(master_seed: int, *tags) -> np.random.SeedSequence:
    """Named child stream; identical regardless of execution order."""
    coded = [hash_tag(t) for t in tags]
    return np.random.SeedSequence(entropy=(int(master_seed), *coded))


def hash_tag(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    return int.from_bytes(str(tag).encode(), "little") % (2**63)


@dataclass
class UtilityRow:
    """One evaluated (strategy, epsilon) cell of the protocol."""

    strategy: str
    epsilon: float
    family: str = ""
    topology_seed: int = -1
    u_d: float = 0.0
    benign_term: float = 0.0
    malicious_term: float = 0.0
    seed_histogram: dict = field(default_factory=dict)
    wall_time: float = 0.0
    error: str | None = None


def defender_utility(
    network: Network,
    bank: DetectorBank,
    benign_X,
    attack_plans,
    alpha: float,
    T: float,
    n_sims: int,
    seed,
) -> UtilityRow:
    """Monte Carlo utility of a deployed bank against given attack plans."""
    t0 = time.perf_counter()
    benign_X = np.asarray(benign_X, dtype=np.float64).reshape(len(benign_X), -1)
    benign = 0.0
    for i, x in enumerate(benign_X):
        prof = estimate_influence_profile(
            network, bank, x, T, n_sims, derive_seed(hash_tag(seed), "benign", i)
        )
        benign += float(prof.sum())
    malicious = 0.0
    hist: dict = {}
    for i, plan in enumerate(attack_plans):
        malicious += estimate_influence(
            network, bank, plan.seed, plan.payload, T, n_sims,
            derive_seed(hash_tag(seed), "malicious", i),
        )
        hist[plan.seed] = hist.get(plan.seed, 0) + 1
    u_d = alpha * benign - (1.0 - alpha) * malicious
    return UtilityRow(
        strategy="",
        epsilon=float("nan"),
        u_d=u_d,
        benign_term=benign,
        malicious_term=malicious,
        seed_histogram=hist,
        wall_time=time.perf_counter() - t0,
    )


def build_network(config: ExperimentConfig, family: str, topology_seed: int, n_features: int) -> Network:
    gen_seed = derive_seed(config.master_seed, "net", family, topology_seed).generate_state(1)[0]
    if family == "ba":
        net = generate_ba(config.n_nodes, config.ba_exponent, int(gen_seed))
    else:
        net = generate_ws(config.n_nodes, config.ws_k, config.ws_p, int(gen_seed))
    par_seed = derive_seed(config.master_seed, "params", family, topology_seed).generate_state(1)[0]
    return sample_edge_params(net, n_features, int(par_seed))


def prepare_data(config: ExperimentConfig):
    """Corpus -> split -> normalize (stats from the base split) -> trained model."""
    if config.data_csv:
        corpus = load_spambase(config.data_csv)
    else:
        corpus = generate_corpus(seed=config.corpus_seed)
    sizes = SPLIT_SIZES if len(corpus) == sum(SPLIT_SIZES) else _proportional_sizes(len(corpus))
    base, train, test = split(corpus, sizes=sizes, seed=config.split_seed)
    base_n, stats = normalize_minmax(base)
    train_n = apply_normalization(train, stats)
    test_n = apply_normalization(test, stats)
    model, _ = train_logistic(base_n, epochs=config.train_epochs, l2_reg=config.train_l2)
    return model, base_n, train_n, test_n, stats


def _proportional_sizes(total: int):
    base = int(round(total * SPLIT_SIZES[0] / sum(SPLIT_SIZES)))
    hold = (total - base) // 2
    return (total - 2 * hold, hold, hold)


def _subset(dataset: LabeledDataset, n_mal: int, n_ben: int) -> LabeledDataset:
    Xm, Xb = dataset.malicious()[:n_mal], dataset.benign()[:n_ben]
    X = np.vstack([Xm, Xb])
    y = np.concatenate([np.ones(len(Xm), dtype=np.int64), np.zeros(len(Xb), dtype=np.int64)])
    return LabeledDataset(X, y, split_tag=dataset.split_tag)


def fit_strategy(
    strategy: str,
    config: ExperimentConfig,
    network: Network,
    model: LogisticModel,
    base_n: LabeledDataset,
    train_n: LabeledDataset,
    epsilon: float,
    trees,
    cell_seed: int,
) -> DetectorBank:
    if strategy == "baseline":
        return baseline_uniform(model, network)
    if strategy == "retrain":
        bank, _ = retraining_defense(
            base_n, network, epsilon,
            max_rounds=config.retrain_max_rounds,
            attack_subset=config.retrain_subset,
            epochs=config.train_epochs,
            l2_reg=config.train_l2,
            trees=trees,
        )
        return bank
    fit_set = _subset(train_n, config.n_fit_mal, config.n_fit_ben)
    if strategy == "single":
        bank, _ = personalized_single_threshold(
            network, model, fit_set, config.alpha, config.T,
            n_sims=config.n_simulations, seed=cell_seed,
        )
        return bank
    if strategy == "sse":
        bank, _ = sse_defense(
            network, fit_set, config.alpha, epsilon, model,
            T=config.T, n_sims=config.sse_eval_sims, seed=cell_seed,
            iters=config.pgd_iters, beta0=config.pgd_beta0, trees=trees,
        )
        return bank
    raise ValueError(f"unknown strategy {strategy!r}")


def run_protocol(
    config: ExperimentConfig,
    family: str | None = None,
    topology_seed: int | None = None,
    prepared=None,
) -> list:
    """Commit-first evaluation: fit each strategy, let the attacker best-
    respond on held-out malicious content, score with the true utility.

    Returns one UtilityRow per (strategy, epsilon); a failing cell is
    recorded as a row carrying the error message.
    """
    config.validate()
    family = family or config.families[0]
    topology_seed = config.topology_seeds[0] if topology_seed is None else topology_seed
    if prepared is None:
        prepared = prepare_data(config)
    model, base_n, train_n, test_n, _ = prepared
    network = build_network(config, family, topology_seed, base_n.n_features)
    trees = all_trees(network)
    eval_set = _subset(test_n, config.n_eval_mal, config.n_eval_ben)
    rows = []
    bank_cache: dict = {}
    for strategy in config.strategies:
        for epsilon in config.epsilons:
            t0 = time.perf_counter()
            cell = derive_seed(
                config.master_seed, "cell", family, topology_seed, strategy, repr(epsilon)
            ).generate_state(1)[0]
            try:
                if strategy in ("baseline", "single"):  # fit independent of epsilon
                    key = strategy
                    if key not in bank_cache:
                        fit_seed = derive_seed(
                            config.master_seed, "cell", family, topology_seed, strategy,
                            repr(float(config.epsilons[0])),
                        ).generate_state(1)[0]
                        bank_cache[key] = fit_strategy(
                            strategy, config, network, model, base_n, train_n,
                            float(config.epsilons[0]), trees, int(fit_seed),
                        )
                    bank = bank_cache[key]
                else:
                    bank = fit_strategy(
                        strategy, config, network, model, base_n, train_n,
                        epsilon, trees, int(cell),
                    )
                plans = attack_dataset(network, bank, eval_set.malicious(), epsilon, trees=trees)
                row = defender_utility(
                    network, bank, eval_set.benign(), plans,
                    config.alpha, config.T, config.n_simulations, int(cell),
                )
                row.strategy, row.epsilon = strategy, float(epsilon)
                row.family, row.topology_seed = family, topology_seed
                row.wall_time = time.perf_counter() - t0
            except Exception as exc:  # recorded, run continues
                row = UtilityRow(
                    strategy=strategy, epsilon=float(epsilon), family=family,
                    topology_seed=topology_seed, wall_time=time.perf_counter() - t0,
                    error=f"{type(exc).__name__}: {exc}",
                )
            rows.append(row)
    return rows


def _protocol_cell(args):
    config, family, tseed = args
    return run_protocol(config, family=family, topology_seed=tseed)


def reproduce_figures(config: ExperimentConfig, out_dir=None):
    """Protocol over every (family, topology seed); aggregates figure data.

    Returns (figure_rows, report_rows).  figure rows carry per
    (family, strategy, epsilon) the mean and standard deviation of the
    utility across topology seeds.
    """
    config.validate()
    prepared = prepare_data(config)
    cells = [(family, ts) for family in config.families for ts in config.topology_seeds]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_protocol_cell, [(config, f, t) for f, t in cells]))
    else:
        results = [
            run_protocol(config, family=f, topology_seed=t, prepared=prepared)
            for f, t in cells
        ]
    report_rows = [row for rows in results for row in rows]
    figure_rows = []
    for family in config.families:
        fam_param = config.ba_exponent if family == "ba" else config.ws_p
        for strategy in config.strategies:
            for epsilon in config.epsilons:
                vals = [
                    r.u_d
                    for r in report_rows
                    if r.family == family and r.strategy == strategy
                    and r.epsilon == float(epsilon) and r.error is None
                ]
                mean = float(np.mean(vals)) if vals else float("nan")
                std = float(np.std(vals)) if vals else float("nan")
                figure_rows.append(
                    {
                        "family": family,
                        "r_or_ws": fam_param,
                        "strategy": strategy,
                        "epsilon": float(epsilon),
                        "mean_utility": mean,
                        "std": std,
                    }
                )
    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        write_figure_csv(figure_rows, os.path.join(out_dir, "figure.csv"))
        write_report_csv(report_rows, os.path.join(out_dir, "report.csv"))
    return figure_rows, report_rows


def write_figure_csv(figure_rows, path):
    with open(path, "w") as fh:
        fh.write("family,r_or_ws,strategy,epsilon,mean_utility,std\n")
        for r in figure_rows:
            fh.write(
                f"{r['family']},{r['r_or_ws']!r},{r['strategy']},"
                f"{r['epsilon']!r},{r['mean_utility']!r},{r['std']!r}\n"
            )


def write_report_csv(report_rows, path):
    # wall_time deliberately excluded: output bytes must be reproducible
    with open(path, "w") as fh:
        fh.write(
            "family,topology_seed,strategy,epsilon,u_d,benign_term,"
            "malicious_term,top_attack_seed,error\n"
        )
        for r in report_rows:
            top = max(r.seed_histogram, key=r.seed_histogram.get) if r.seed_histogram else -1
            err = r.error or ""
            fh.write(
                f"{r.family},{r.topology_seed},{r.strategy},{r.epsilon!r},"
                f"{r.u_d!r},{r.benign_term!r},{r.malicious_term!r},{top},{err}\n"
            )
