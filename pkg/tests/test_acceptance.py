"""Acceptance criteria 1-9.

Each test records one PASS/FAIL line (see ``conftest.py``); the verdicts are
repeated in the terminal summary.  The training-based criteria (4, 5, 6, 8)
share one cache of trained models, so the whole file takes a while on one
CPU.  Run it directly with ``python3 tests/test_acceptance.py``.
"""

import itertools
import time

import numpy as np
import pytest

from gbpn import autodiff as ad
from gbpn.bp import residual_trace
from gbpn.cli import sampler_fidelity_suite, tree_exactness_suite
from gbpn.graph import grid_graph
from gbpn.model import ModelConfig, accuracy, coupling, forward, init_params, loss, self_log_beliefs
from gbpn.mrf import DEFAULT_COUPLING, generate_dataset
from gbpn.sampling import importance_estimate, optimal_sampling_distribution, summed_variance
from gbpn.trainer import TrainConfig, eval_conditioning, train_full_batch, train_mini_batch

SEEDS = range(5)

# pinned tolerances
TREE_TOL, TREE_SECONDS = 1e-8, 30.0
GRAD_TOL, GRAD_SECONDS = 1e-4, 60.0
TV_TOL, TV_SECONDS = 0.02, 60.0
GBPN_PLUS_MIN, GBPN_MINUS_MIN = 0.70, 0.67
GBPN_I_MINUS_RANGE, MLP_PLUS_RANGE = (0.44, 0.55), (0.63, 0.71)
TABLE_CPU_SECONDS = 20 * 60
RESIDUAL_FACTOR, ACC_DRIFT = 0.01, 0.005
UNBIASED_TOL = 1e-12
VAR_OPT_MAX, RHO_MAX = 1.10, 1.0
EQUIV_TOL = 1e-12


class _Runs:
    """Trained models keyed by ``(kind, mode, bp_steps, seed)``, built on demand."""

    def __init__(self):
        self.bundles = {}
        self.results = {}
        self.cpu = {}

    def bundle(self, kind, seed):
        key = (kind, seed)
        if key not in self.bundles:
            self.bundles[key] = generate_dataset(kind, 51, 51, DEFAULT_COUPLING, seed=seed)
        return self.bundles[key]

    def get(self, kind, mode, T, seed):
        key = (kind, mode, T, seed)
        if key not in self.results:
            b = self.bundle(kind, seed)
            t0 = time.process_time()
            self.results[key] = train_full_batch(b, ModelConfig(bp_steps=T, mode=mode),
                                                 TrainConfig(epochs=500, seed=seed))
            self.cpu[key] = time.process_time() - t0
        return self.results[key]

    def test_acc(self, kind, mode, T, seed):
        return self.get(kind, mode, T, seed).best["test_acc"]


@pytest.fixture(scope="session")
def runs():
    return _Runs()


def test_criterion_1_tree_exactness(record):
    t0 = time.process_time()
    worst = tree_exactness_suite(max_nodes=12, num_classes=None, trials=50, seed=0)
    elapsed = time.process_time() - t0
    ok = worst < TREE_TOL and elapsed < TREE_SECONDS
    record(1, ok, f"max |BP - exact| = {worst:.2e} (< {TREE_TOL:g}), {elapsed:.1f}s (< {TREE_SECONDS:g}s)")
    assert ok


def test_criterion_2_gradients(record):
    t0 = time.process_time()
    g = grid_graph(2, 4)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(8, 2))
    labels = rng.integers(0, 2, size=8)
    worst = 0.0
    for beta in (0.0, 0.5):
        cfg = ModelConfig(hidden_width=16, bp_steps=3, beta=beta)
        p = init_params(2, 2, cfg, rng)
        p.coupling_raw = rng.normal(scale=0.5, size=(2, 2))
        cond = {0: int(labels[0]), 6: int(labels[6])}
        targets = [1, 2, 3, 4, 5, 7]

        def f(tape, t):
            return loss(forward(g, X, t, cfg, conditioned=cond), labels, targets, g, beta)

        worst = max(worst, ad.grad_check(f, p.as_dict()))
    elapsed = time.process_time() - t0
    ok = worst < GRAD_TOL and elapsed < GRAD_SECONDS
    record(2, ok, f"max relative FD error = {worst:.2e} (< {GRAD_TOL:g}), {elapsed:.1f}s")
    assert ok


def test_criterion_3_sampler_fidelity(record):
    t0 = time.process_time()
    tv = sampler_fidelity_suite(seed=0, num_samples=50_000, burn_in=1000)
    elapsed = time.process_time() - t0
    ok = max(tv.values()) < TV_TOL and elapsed < TV_SECONDS
    record(3, ok, f"max TV metropolis={tv['metropolis']:.4f} gibbs={tv['gibbs']:.4f} "
                  f"(< {TV_TOL}), {elapsed:.1f}s")
    assert ok


def test_criterion_4_table(record, runs):
    plan = {
        "GBPN ising+": ("ising+", "transductive", 5),
        "GBPN ising-": ("ising-", "transductive", 5),
        "GBPN-I ising-": ("ising-", "inductive", 5),
        "MLP ising+": ("ising+", "transductive", 0),
    }
    means = {name: float(np.mean([runs.test_acc(*cfg, s) for s in SEEDS])) for name, cfg in plan.items()}
    cpu = sum(runs.cpu[(*cfg, s)] for cfg in plan.values() for s in SEEDS)
    checks = {
        "GBPN ising+": means["GBPN ising+"] >= GBPN_PLUS_MIN,
        "GBPN ising-": means["GBPN ising-"] >= GBPN_MINUS_MIN,
        "GBPN-I ising-": GBPN_I_MINUS_RANGE[0] <= means["GBPN-I ising-"] <= GBPN_I_MINUS_RANGE[1],
        "MLP ising+": MLP_PLUS_RANGE[0] <= means["MLP ising+"] <= MLP_PLUS_RANGE[1],
    }
    ok = all(checks.values()) and cpu <= TABLE_CPU_SECONDS
    detail = ", ".join(f"{k} {means[k]:.3f}{'' if checks[k] else ' (out of band)'}" for k in plan)
    record(4, ok, f"{detail}; training CPU {cpu / 60:.1f} min (<= {TABLE_CPU_SECONDS // 60} min)")
    assert ok


def _sign_structure(L, positive):
    c = L.shape[0]
    centered = L - L.mean()
    diag = np.diag(centered)
    off = centered[~np.eye(c, dtype=bool)]
    return diag.min() > off.max() if positive else diag.max() < off.min()


def test_criterion_5_identifiability(record, runs):
    hits = {}
    for kind in ("ising+", "ising-", "mrf+", "mrf-"):
        hits[kind] = sum(_sign_structure(coupling(runs.get(kind, "transductive", 5, s).params).value,
                                         kind.endswith("+")) for s in SEEDS)
    ok = all(h == len(SEEDS) for h in hits.values())
    record(5, ok, ", ".join(f"{k} {h}/{len(SEEDS)}" for k, h in hits.items()))
    assert ok


def test_criterion_6_convergence(record, runs):
    b = runs.bundle("ising+", 0)
    res = runs.get("ising+", "transductive", 5, 0)
    cfg = ModelConfig(bp_steps=20)
    _, traj = forward(b.graph, b.features, res.params, cfg,
                      conditioned=eval_conditioning(b, cfg), keep_trajectory=True)
    r = residual_trace(traj)
    accs = [accuracy(snap, b.labels, b.splits["test"]) for snap in traj]
    drift = max(abs(a - accs[5]) for a in accs[5:])
    ok = r[10] < RESIDUAL_FACTOR * r[1] and drift < ACC_DRIFT
    record(6, ok, f"r(10)/r(1) = {r[10] / r[1]:.2e} (< {RESIDUAL_FACTOR}), "
                  f"test accuracy drift after step 5 = {100 * drift:.2f} pp (< {100 * ACC_DRIFT:g})")
    assert ok


def test_criterion_7_estimator(record):
    rng = np.random.default_rng(0)
    worst = 0.0
    for k in range(1, 7):
        for _ in range(10):
            X = rng.normal(size=(k, 3))
            p = rng.dirichlet(np.ones(k))
            mean = sum(p[j] * importance_estimate(X, [j], p) for j in range(k))
            worst = max(worst, float(np.abs(mean - X.sum(axis=0) / k).max()))
            # two i.i.d. draws target twice the scaled aggregate
            if k <= 4:
                mean2 = sum(p[a] * p[b] * importance_estimate(X, [a, b], p)
                            for a, b in itertools.product(range(k), repeat=2))
                worst = max(worst, float(np.abs(mean2 - 2 * X.sum(axis=0) / k).max()))
    grid = np.round(np.arange(1, 100) * 0.01, 2)
    optimal = 0
    for _ in range(20):
        X = rng.normal(size=(2, 3))
        v_star = summed_variance(X, optimal_sampling_distribution(X))
        v_grid = min(summed_variance(X, [q, 1 - q]) for q in grid)
        optimal += v_star <= v_grid + 1e-12
    ok = worst < UNBIASED_TOL and optimal == 20
    record(7, ok, f"max |E[Z] - target| = {worst:.1e} (< {UNBIASED_TOL:g}); p* optimal on {optimal}/20 grids")
    assert ok


def test_criterion_8_variance(record, runs):
    imp, rho, undefined = [], [], []
    for s in SEEDS:
        b = runs.bundle("ising+", s)
        start = runs.get("ising+", "transductive", 5, s).params
        res = train_mini_batch(b, ModelConfig(bp_steps=2),
                               TrainConfig(epochs=100, batch_size=256, fanout=2, sampling="exp3",
                                           seed=s, track_variance=True), params=start)
        window = res.variance[19:]
        imp.append(np.mean([v.importance_over_optimal for v in window]))
        rho.append(np.mean([v.rho for v in window]))
        undefined.append(np.mean([v.undefined for v in window]))
    imp, rho = np.array(imp), np.array(rho)
    # "within one standard deviation" only counts when the spread is smaller
    # than the distance the mean would otherwise need to move
    imp_ok = imp.mean() - imp.std(ddof=1) <= VAR_OPT_MAX and imp.std(ddof=1) < imp.mean()
    rho_ok = rho.mean() - rho.std(ddof=1) <= RHO_MAX and rho.std(ddof=1) < rho.mean()
    ok = imp_ok and rho_ok
    record(8, ok, f"Var(imp)/Var(opt) = {imp.mean():.4g} +- {imp.std(ddof=1):.3g} (<= {VAR_OPT_MAX}), "
                  f"rho = {rho.mean():.4g} +- {rho.std(ddof=1):.3g} (<= {RHO_MAX}); "
                  f"{np.mean(undefined):.0f} nodes/epoch with zero optimal variance excluded")
    assert ok


def test_criterion_9_equivalences(record):
    rng = np.random.default_rng(0)
    g = grid_graph(4, 4)
    X = rng.normal(size=(16, 2))
    worst_zero, exact_t0 = 0.0, True
    for c in (2, 3):
        cfg = ModelConfig(hidden_width=32)
        p = init_params(2, c, cfg, rng)
        mlp = self_log_beliefs(X, p).value
        for T in (1, 3, 8):
            out = forward(g, X, p, ModelConfig(hidden_width=32, bp_steps=T)).value
            worst_zero = max(worst_zero, float(np.abs(out - mlp).max()))
        p.coupling_raw = rng.normal(size=(c, c))
        exact_t0 &= np.array_equal(forward(g, X, p, ModelConfig(hidden_width=32, bp_steps=0)).value, mlp)
    worst_loss = 0.0
    labels = rng.integers(0, 2, size=16)
    for c in (2, 3):
        uniform = ad.constant(np.full((16, c), -np.log(c)))
        for beta in (0.0, 0.5, 1.0, 3.0):
            val = loss(uniform, labels, np.arange(16), g, beta).value
            worst_loss = max(worst_loss, abs(val - np.log(c)))
    ok = worst_zero <= EQUIV_TOL and exact_t0 and worst_loss <= EQUIV_TOL
    record(9, ok, f"zero coupling max diff {worst_zero:.1e}; T=0 identical: {exact_t0}; "
                  f"uniform loss max |L - ln c| {worst_loss:.1e}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
