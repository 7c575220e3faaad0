"""``gbpn`` command-line interface.

Every command prints one JSON object on stdout.  Exit codes: 0 success,
1 usage error, 2 data error, 3 failed check.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .bp import run_bp, residual_trace, sample_forest
from .dataio import load_bundle, load_model, save_bundle, save_model
from .errors import GBPNError, InputError
from .graph import diameter, random_tree
from .model import ModelConfig, accuracy, coupling, forward
from .mrf import (DEFAULT_COUPLING, KINDS, MrfSpec, edge_agreement, empirical_marginals,
                  exact_marginals, generate_dataset, gibbs_sample, metropolis_sample,
                  synthetic_spec)
from .trainer import (TrainConfig, eval_conditioning, forest_root_beliefs, train_full_batch,
                      train_mini_batch)

log = logging.getLogger("gbpn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def _plot(args, fn, rows, csv_path):
    if args.no_plot:
        return None
    from . import plotting

    return getattr(plotting, fn)(rows, os.path.splitext(csv_path)[0] + ".png")


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return value
    return parse


def _non_negative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def _batch(text):
    if text == "full":
        return 0
    try:
        return _positive(int)(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected 'full' or a positive integer") from None


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    bundle = generate_dataset(args.kind, args.rows, args.cols, args.coupling, args.seed, args.burn_in)
    save_bundle(bundle, args.out)
    hist = np.bincount(bundle.labels, minlength=bundle.num_classes)
    return {"out": args.out, "kind": args.kind, "nodes": bundle.num_nodes,
            "edges": bundle.graph.num_edges, "num_classes": bundle.num_classes,
            "class_histogram": hist.tolist(),
            "edge_agreement": edge_agreement(bundle.graph, bundle.labels)}


def _model_config(args):
    return ModelConfig(hidden_width=args.hidden, bp_steps=args.bp_steps, keep_prob=args.keep_prob,
                       beta=args.beta, mode=args.mode, loss_weighting=args.weighting)


def cmd_train(args):
    bundle = load_bundle(args.data)
    mcfg = _model_config(args)
    tcfg = TrainConfig(epochs=args.epochs, lr=args.lr, weight_decay=args.weight_decay,
                       batch_size=args.batch, fanout=args.fanout, sampling=args.sampling,
                       seed=args.seed, condition_on_val=args.include_val)
    if args.batch == 0 and args.sampling != "uniform":
        raise UsageError("--sampling exp3 needs mini-batch training (--batch N)")
    run = train_full_batch if args.batch == 0 else train_mini_batch
    result = run(bundle, mcfg, tcfg)
    save_model(result.params, mcfg, args.out)
    out = {"model": args.out, "best_epoch": result.best_epoch, **{k: result.best[k] for k in
           ("train_acc", "val_acc", "test_acc")}, "final_loss": result.history[-1]["loss"]}
    if args.history:
        _write_csv(args.history, ["epoch", "loss", "train_acc", "val_acc", "test_acc"], result.history)
        out["history"] = args.history
        out["plot"] = _plot(args, "plot_history", result.history, args.history)
    return out


def _load_pair(args):
    bundle = load_bundle(args.data)
    params, mcfg = load_model(args.model)
    if params.feature_dim != bundle.feature_dim or params.num_classes != bundle.num_classes:
        raise InputError(f"model expects {params.feature_dim} features / {params.num_classes} classes, "
                         f"bundle has {bundle.feature_dim} / {bundle.num_classes}")
    if getattr(args, "mode", None):
        mcfg = ModelConfig.from_dict({**mcfg.to_dict(), "mode": args.mode})
    if getattr(args, "bp_steps", None) is not None:
        mcfg = ModelConfig.from_dict({**mcfg.to_dict(), "bp_steps": args.bp_steps})
    return bundle, params, mcfg


def degree_buckets(log_beliefs, labels, nodes, degrees):
    """Accuracy and mean log-likelihood of ``nodes`` grouped by degree."""
    out = []
    for d in np.unique(degrees[nodes]):
        ids = nodes[degrees[nodes] == d]
        ll = log_beliefs[ids, labels[ids]]
        out.append({"degree": int(d), "count": int(ids.size),
                    "accuracy": float(np.mean(np.argmax(log_beliefs[ids], axis=1) == labels[ids])),
                    "log_likelihood": float(np.mean(ll))})
    return out


def cmd_eval(args):
    bundle, params, mcfg = _load_pair(args)
    cond = eval_conditioning(bundle, mcfg, args.include_val)
    if args.max_neighbors is None or mcfg.bp_steps == 0:
        logb = forward(bundle.graph, bundle.features, params, mcfg, conditioned=cond).value
    else:
        rng = np.random.default_rng(args.seed)
        forest = sample_forest(bundle.graph, np.arange(bundle.num_nodes), mcfg.bp_steps,
                               args.max_neighbors, rng)
        logb = forest_root_beliefs(bundle, params, mcfg, forest, cond).value
    accs = {f"{k}_acc": accuracy(logb, bundle.labels, bundle.splits[k]) for k in ("train", "val", "test")}
    test = np.asarray(bundle.splits["test"])
    return {**accs, "mode": mcfg.mode, "bp_steps": mcfg.bp_steps,
            "max_neighbors": args.max_neighbors,
            "test_by_degree": degree_buckets(logb, bundle.labels, test, bundle.graph.degrees)}


def cmd_inspect(args):
    params, mcfg = load_model(args.model)
    L = coupling(params).value
    centered = L - L.mean()
    c = L.shape[0]
    off = ~np.eye(c, dtype=bool)
    return {"coupling": L.tolist(), "centered": centered.tolist(),
            "diagonal_mean": float(np.diag(centered).mean()),
            "off_diagonal_mean": float(centered[off].mean()),
            "config": mcfg.to_dict()}


def cmd_convergence(args):
    bundle, params, mcfg = _load_pair(args)
    if args.max_steps < 1:
        raise UsageError("--max-steps must be >= 1")
    cfg = ModelConfig.from_dict({**mcfg.to_dict(), "bp_steps": args.max_steps})
    _, traj = forward(bundle.graph, bundle.features, params, cfg,
                      conditioned=eval_conditioning(bundle, cfg), keep_trajectory=True)
    r = residual_trace(traj)
    rows = [{"step": t, "residual": float(r[t]),
             "train_acc": accuracy(b, bundle.labels, bundle.splits["train"]),
             "test_acc": accuracy(b, bundle.labels, bundle.splits["test"])}
            for t, b in enumerate(traj)]
    _write_csv(args.out, ["step", "residual", "train_acc", "test_acc"], rows)
    return {"out": args.out, "plot": _plot(args, "plot_convergence", rows, args.out),
            "final_residual": rows[-1]["residual"], "residual_1": rows[1]["residual"],
            "test_acc_final": rows[-1]["test_acc"]}


def cmd_variance(args):
    bundle = load_bundle(args.data)
    params = None
    if args.model:
        params, mcfg = load_model(args.model)
        mcfg = ModelConfig.from_dict({**mcfg.to_dict(), "bp_steps": args.bp_steps})
    else:
        mcfg = ModelConfig(bp_steps=args.bp_steps, mode=args.mode, hidden_width=args.hidden)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch or 256, fanout=args.fanout,
                       sampling="exp3", seed=args.seed, track_variance=True)
    result = train_mini_batch(bundle, mcfg, tcfg, params=params)
    rows = [{"epoch": k + 1, "importance_over_optimal": v.importance_over_optimal,
             "uniform_over_optimal": v.uniform_over_optimal, "rho": v.rho}
            for k, v in enumerate(result.variance)]
    _write_csv(args.out, ["epoch", "importance_over_optimal", "uniform_over_optimal", "rho"], rows)
    tail = rows[min(args.average_from, len(rows)) - 1:]
    return {"out": args.out, "plot": _plot(args, "plot_variance", rows, args.out),
            "mean_importance_over_optimal": float(np.mean([r["importance_over_optimal"] for r in tail])),
            "mean_rho": float(np.mean([r["rho"] for r in tail]))}


# ---------------------------------------------------------------------------
# oracle suites


def tree_exactness_suite(max_nodes, num_classes, trials, seed, tol=1e-8):
    """Random trees: BP at T = diameter vs enumeration, with and without clamps.

    Returns the worst absolute difference seen.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, max_nodes + 1))
        c = int(num_classes) if num_classes else int(rng.integers(2, 4))
        g = random_tree(n, rng)
        h = rng.normal(size=(n, c))
        h -= np.logaddexp.reduce(h, axis=1, keepdims=True)
        A = rng.normal(size=(c, c))
        spec = MrfSpec(g, h, A + A.T)
        k = int(rng.integers(1, n + 1))
        clamps = {int(i): int(rng.integers(0, c)) for i in rng.choice(n, size=k, replace=False)}
        for cond in (None, clamps):
            st, _ = run_bp(g, h, spec.log_coupling, diameter(g), clamped=cond)
            worst = max(worst, float(np.abs(st.beliefs - exact_marginals(spec, cond)).max()))
    return worst


def sampler_fidelity_suite(seed, num_samples=50_000, burn_in=1000, kinds=("ising+", "ising-"),
                           coupling_strength=DEFAULT_COUPLING):
    """Worst per-node TV distance of both samplers to enumeration on 3x3 Ising grids."""
    out = {}
    for kind in kinds:
        spec = synthetic_spec(kind, 3, 3, coupling_strength)
        exact = exact_marginals(spec)
        for name, sampler in (("metropolis", metropolis_sample), ("gibbs", gibbs_sample)):
            emp = empirical_marginals(sampler(spec, num_samples, burn_in, seed), spec.num_classes)
            tv = float((0.5 * np.abs(emp - exact).sum(axis=1)).max())
            out[name] = max(out.get(name, 0.0), tv)
    return out


def cmd_oracle_check(args):
    worst = tree_exactness_suite(args.nodes, args.classes, args.trials, args.seed)
    tv = sampler_fidelity_suite(args.seed, args.samples)
    checks = {"tree_exactness": worst < 1e-8,
              **{f"{k}_tv": v < 0.02 for k, v in tv.items()}}
    return {"pass": all(checks.values()), "checks": checks, "tree_max_abs_diff": worst,
            "sampler_max_tv": tv}


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="gbpn", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=_positive(int), default=None,
                   help="BLAS threads (default $GBPN_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="sample a synthetic grid dataset")
    g.add_argument("--kind", choices=KINDS, required=True)
    g.add_argument("--rows", type=_positive(int), default=51)
    g.add_argument("--cols", type=_positive(int), default=51)
    g.add_argument("--coupling", type=float, default=DEFAULT_COUPLING)
    g.add_argument("--burn-in", type=_non_negative_int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    def model_flags(sp, mode_default="transductive"):
        sp.add_argument("--mode", choices=("inductive", "transductive"), default=mode_default)
        sp.add_argument("--bp-steps", type=_non_negative_int, default=5)
        sp.add_argument("--hidden", type=_positive(int), default=256)
        sp.add_argument("--keep-prob", type=float, default=0.9)
        sp.add_argument("--beta", type=float, default=0.5)
        sp.add_argument("--weighting", choices=("temper", "scale"), default="temper")

    t = sub.add_parser("train", help="train a model on a bundle")
    t.add_argument("--data", required=True)
    model_flags(t)
    t.add_argument("--epochs", type=_positive(int), default=500)
    t.add_argument("--lr", type=_positive(float), default=1e-3)
    t.add_argument("--weight-decay", type=float, default=2.5e-4)
    t.add_argument("--batch", type=_batch, default=0, help="'full' or number of roots per step")
    t.add_argument("--fanout", type=_positive(int), default=5)
    t.add_argument("--sampling", choices=("uniform", "exp3"), default="uniform")
    t.add_argument("--include-val", action="store_true", help="also clamp validation labels at eval")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--history")
    t.add_argument("--no-plot", action="store_true")

    e = sub.add_parser("eval", help="evaluate a trained model")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--mode", choices=("inductive", "transductive"))
    e.add_argument("--max-neighbors", type=_positive(int))
    e.add_argument("--include-val", action="store_true")
    e.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("inspect", help="print the learned coupling")
    i.add_argument("--model", required=True)

    c = sub.add_parser("convergence", help="residual per BP step")
    c.add_argument("--data", required=True)
    c.add_argument("--model", required=True)
    c.add_argument("--max-steps", type=int, default=20)
    c.add_argument("--out", required=True)
    c.add_argument("--no-plot", action="store_true")

    v = sub.add_parser("variance", help="neighbour-sampling variance ratios during Exp3 training")
    v.add_argument("--data", required=True)
    v.add_argument("--model", help="initial parameters (default: fresh)")
    model_flags(v)
    v.set_defaults(bp_steps=2)
    v.add_argument("--epochs", type=_positive(int), default=100)
    v.add_argument("--batch", type=_batch, default=256)
    v.add_argument("--fanout", type=_positive(int), default=2)
    v.add_argument("--average-from", type=_positive(int), default=20)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)
    v.add_argument("--no-plot", action="store_true")

    o = sub.add_parser("oracle-check", help="tree-exactness and sampler-fidelity suites")
    o.add_argument("--nodes", type=_positive(int), default=10)
    o.add_argument("--classes", type=int, choices=(2, 3, 4), default=3)
    o.add_argument("--trials", type=_positive(int), default=50)
    o.add_argument("--samples", type=_positive(int), default=50_000)
    o.add_argument("--seed", type=int, default=0)
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect,
            "convergence": cmd_convergence, "variance": cmd_variance, "oracle-check": cmd_oracle_check}


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("GBPN_THREADS")
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"GBPN_THREADS must be a positive integer, got {env!r}")
    return n


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads(args)):
            result = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"gbpn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GBPNError, OSError) as exc:
        print(f"gbpn: {exc}", file=sys.stderr)
        return EXIT_DATA
    _emit(result)
    if args.command == "oracle-check" and not result["pass"]:
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
