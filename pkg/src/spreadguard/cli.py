"""Command-line entry points.

Subcommands: gen-net, prep-data, train-base, defend, attack, evaluate,
reproduce.  Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import attacker, baselines, dataset, defender, detector, diffusion, harness, netgen


def _load_config(args) -> harness.ExperimentConfig:
    if getattr(args, "config", None):
        cfg = harness.ExperimentConfig.from_file(args.config)
    else:
        cfg = harness.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.master_seed = args.seed
    return cfg.validate()


def _cmd_gen_net(args):
    if args.family == "ba":
        net = netgen.generate_ba(args.nodes, args.exponent, args.seed or 0)
    else:
        net = netgen.generate_ws(args.nodes, args.ring_degree, args.rewire_p, args.seed or 0)
    if args.features:
        net = netgen.sample_edge_params(net, args.features, (args.seed or 0) + 1)
    netgen.save_network(net, args.out)
    stats = netgen.graph_stats(net)
    print(
        f"wrote {args.out}: {net.n_nodes} nodes, {net.n_edges} edges, "
        f"msp={stats['mean_shortest_path']:.3f} "
        f"clust={stats['clustering_coefficient']:.3f} "
        f"exponent={stats['fitted_exponent']:.3f}"
    )
    return 0


def _cmd_prep_data(args):
    cfg = _load_config(args)
    if args.spambase:
        cfg.data_csv = args.spambase
    os.makedirs(args.out, exist_ok=True)
    if cfg.data_csv:
        corpus = dataset.load_spambase(cfg.data_csv)
    else:
        corpus = dataset.generate_corpus(seed=cfg.corpus_seed)
        print(f"no corpus file given; generated synthetic corpus (seed={cfg.corpus_seed})")
    sizes = (
        dataset.SPLIT_SIZES
        if len(corpus) == sum(dataset.SPLIT_SIZES)
        else harness._proportional_sizes(len(corpus))
    )
    base, train, test = dataset.split(corpus, sizes=sizes, seed=cfg.split_seed)
    base_n, stats = dataset.normalize_minmax(base)
    train_n = dataset.apply_normalization(train, stats)
    test_n = dataset.apply_normalization(test, stats)
    for name, ds in (("base", base_n), ("train", train_n), ("test", test_n)):
        dataset.save_corpus_csv(ds, os.path.join(args.out, f"{name}.csv"), header=True)
    dataset.save_stats(stats, os.path.join(args.out, "stats.txt"))
    print(f"wrote splits {[len(base_n), len(train_n), len(test_n)]} and stats under {args.out}")
    return 0


def _load_split(data_dir, name) -> dataset.LabeledDataset:
    path = os.path.join(data_dir, f"{name}.csv")
    rows, labels = [], []
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("f0,"):
            fh.seek(0)
        for line in fh:
            parts = line.strip().split(",")
            if not parts[0]:
                continue
            rows.append([float(v) for v in parts[:-1]])
            labels.append(int(float(parts[-1])))
    return dataset.LabeledDataset(np.array(rows), np.array(labels), split_tag=name)


def _cmd_train_base(args):
    cfg = _load_config(args)
    base_n = _load_split(args.data, "base")
    model, history = dataset.train_logistic(
        base_n, epochs=cfg.train_epochs, l2_reg=cfg.train_l2
    )
    dataset.save_model(model, args.out)
    test_n = None
    test_path = os.path.join(args.data, "test.csv")
    if os.path.exists(test_path):
        test_n = _load_split(args.data, "test")
    msg = f"wrote {args.out}: final loss {history[-1]:.4f}"
    if test_n is not None:
        msg += f", test accuracy {dataset.accuracy(model, test_n):.4f}"
    print(msg)
    return 0


def _cmd_defend(args):
    cfg = _load_config(args)
    net = netgen.load_network(args.net)
    model = dataset.load_model(args.model)
    base_n = _load_split(args.data, "base")
    train_n = _load_split(args.data, "train")
    trees = diffusion.all_trees(net)
    os.makedirs(args.out, exist_ok=True)
    epsilon = args.epsilon if args.epsilon is not None else cfg.epsilons[0]
    bank = harness.fit_strategy(
        args.strategy, cfg, net, model, base_n, train_n, epsilon, trees, cfg.master_seed
    )
    out_path = os.path.join(args.out, f"thresholds_{args.strategy}.txt")
    detector.save_thresholds(bank, out_path)
    print(f"wrote {out_path}")
    return 0


def _cmd_attack(args):
    cfg = _load_config(args)
    net = netgen.load_network(args.net)
    model = dataset.load_model(args.model)
    thresholds = detector.load_thresholds(args.thresholds)
    bank = detector.DetectorBank(model=model, thresholds=thresholds)
    test_n = _load_split(args.data, "test")
    mal = test_n.malicious()
    if args.limit:
        mal = mal[: args.limit]
    epsilon = args.epsilon if args.epsilon is not None else cfg.epsilons[0]
    plans = attacker.attack_dataset(net, bank, mal, epsilon)
    attacker.export_attacks_csv(plans, mal, args.out)
    n_feas = sum(p.feasible for p in plans)
    print(f"wrote {args.out}: {len(plans)} attacks, {n_feas} feasible")
    return 0


def _cmd_evaluate(args):
    cfg = _load_config(args)
    net = netgen.load_network(args.net)
    model = dataset.load_model(args.model)
    thresholds = detector.load_thresholds(args.thresholds)
    bank = detector.DetectorBank(model=model, thresholds=thresholds)
    test_n = _load_split(args.data, "test")
    eval_set = harness._subset(test_n, cfg.n_eval_mal, cfg.n_eval_ben)
    epsilon = args.epsilon if args.epsilon is not None else cfg.epsilons[0]
    plans = attacker.attack_dataset(net, bank, eval_set.malicious(), epsilon)
    row = harness.defender_utility(
        net, bank, eval_set.benign(), plans, cfg.alpha, cfg.T,
        cfg.n_simulations, cfg.master_seed,
    )
    row.strategy, row.epsilon = "evaluate", float(epsilon)
    harness.write_report_csv([row], args.out)
    print(f"wrote {args.out}: U_d={row.u_d:.4f} benign={row.benign_term:.4f} "
          f"malicious={row.malicious_term:.4f}")
    return 0


def _cmd_reproduce(args):
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    figure_rows, report_rows = harness.reproduce_figures(cfg, out_dir=args.out)
    # persist the evaluated networks and each cell's thresholds for inspection
    prepared = harness.prepare_data(cfg)
    model, base_n, train_n = prepared[0], prepared[1], prepared[2]
    for family in cfg.families:
        for ts in cfg.topology_seeds:
            net = harness.build_network(cfg, family, ts, base_n.n_features)
            netgen.save_network(net, os.path.join(args.out, f"net_{family}_{ts}.txt"))
    print(f"wrote figure.csv and report.csv under {args.out} "
          f"({len(report_rows)} cells)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spreadguard")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int, help="master seed override")

    sp = sub.add_parser("gen-net", help="generate a network file")
    sp.add_argument("--family", choices=["ba", "ws"], required=True)
    sp.add_argument("--nodes", type=int, required=True)
    sp.add_argument("--exponent", type=float, default=2.1)
    sp.add_argument("--ring-degree", type=int, default=netgen.WS_CALIBRATED_K)
    sp.add_argument("--rewire-p", type=float, default=netgen.WS_CALIBRATED_P)
    sp.add_argument("--features", type=int, default=0)
    sp.add_argument("--out", required=True)
    common(sp, config=False)
    sp.set_defaults(func=_cmd_gen_net)

    sp = sub.add_parser("prep-data", help="split + normalize the corpus")
    sp.add_argument("--spambase", help="corpus CSV (57 features + label)")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=_cmd_prep_data)

    sp = sub.add_parser("train-base", help="train the shared logistic scorer")
    sp.add_argument("--data", required=True, help="directory from prep-data")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=_cmd_train_base)

    sp = sub.add_parser("defend", help="fit a defense strategy")
    sp.add_argument("--strategy", choices=list(harness.STRATEGIES), required=True)
    sp.add_argument("--net", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=_cmd_defend)

    sp = sub.add_parser("attack", help="attack the held-out malicious content")
    sp.add_argument("--net", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--thresholds", required=True)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--limit", type=int)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=_cmd_attack)

    sp = sub.add_parser("evaluate", help="utility of a deployed bank")
    sp.add_argument("--net", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--thresholds", required=True)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=_cmd_evaluate)

    sp = sub.add_parser("reproduce", help="full sweep emitting figure data")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=_cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
