"""Importance sampling of neighbours for mini-batch message aggregation.

For a node with neighbourhood ``N`` and incoming log-messages ``X`` (one row
per neighbour), drawing ``d`` neighbours i.i.d. from ``p`` and summing
``X_j / (|N| p_j)`` gives an unbiased estimate of ``(d / |N|) * sum_j X_j``.
The summed (over classes) variance of that estimate is minimized by
``p_j`` proportional to ``||X_j||``.  :class:`Exp3Sampler` learns sampling
distributions online from the messages it observes.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


def _as_messages(messages):
    X = np.asarray(messages, dtype=np.float64)
    return X[:, None] if X.ndim == 1 else X


def optimal_sampling_distribution(messages):
    X = _as_messages(messages)
    if X.shape[0] < 1:
        raise InputError("need at least one neighbour")
    norms = np.sqrt((X ** 2).sum(axis=1))
    s = norms.sum()
    if s == 0.0:
        return np.full(X.shape[0], 1.0 / X.shape[0])
    return norms / s


def importance_estimate(messages, sampled, probs, neighborhood_size=None):
    """``sum_{j in sampled} X_j / (|N| p_j)``; ``sampled`` may repeat indices."""
    X = _as_messages(messages)
    sampled = np.asarray(sampled, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    n = X.shape[0] if neighborhood_size is None else int(neighborhood_size)
    if np.any(probs[sampled] <= 0):
        raise InputError("a sampled neighbour has zero sampling probability")
    return (X[sampled] / (n * probs[sampled])[:, None]).sum(axis=0)


def summed_variance(messages, probs, num_samples=1):
    """Variance of the importance estimate summed over classes.

    ``num_samples / |N|^2 * sum_y [sum_j X_j(y)^2 / p_j - (sum_j X_j(y))^2]``
    """
    X = _as_messages(messages)
    p = np.asarray(probs, dtype=np.float64)
    n = X.shape[0]
    second = ((X ** 2) / p[:, None]).sum()
    mean_sq = (X.sum(axis=0) ** 2).sum()
    return num_samples / n ** 2 * max(second - mean_sq, 0.0)


# ---------------------------------------------------------------------------
# Exp3


@dataclass
class Exp3State:
    """Exponential weights over ``K`` neighbours, stored in log space."""

    log_weights: np.ndarray
    epoch: int = 0
    cum_sq_loss: float = 0.0
    explore: float = 0.01
    clip: float = 1e4

    @classmethod
    def uniform(cls, k, explore=0.01, clip=1e4):
        if k < 1:
            raise InputError("Exp3 needs at least one arm")
        return cls(np.zeros(k), explore=explore, clip=clip)

    @property
    def num_arms(self):
        return int(self.log_weights.shape[0])

    @property
    def weights(self):
        return np.exp(self.log_weights - self.log_weights.max())

    @property
    def probs(self):
        w = self.weights
        q = w / w.sum()
        return (1.0 - self.explore) * q + self.explore / self.num_arms


def exp3_loss(message, p):
    """Linearized variance loss of one neighbour: ``-||X_j|| / p_j^2``."""
    return -np.sqrt(np.sum(np.asarray(message, dtype=np.float64) ** 2)) / p ** 2


def exp3_update(state, sampled, messages, probs=None):
    """One bandit round from the neighbours drawn this epoch.

    ``sampled`` holds arm indices (repeats allowed) and ``messages`` the
    matching message vectors.  Each draw contributes its loss divided by the
    probability it was drawn with (partial information), averaged over
    draws and clipped to ``state.clip``.  The learning rate is
    ``sqrt(ln K / max(1, S))`` with ``S`` the running sum of squared loss
    estimates over all arms and rounds.  ``probs`` defaults to the state's
    own distribution.
    """
    sampled = np.atleast_1d(np.asarray(sampled, dtype=np.int64))
    X = np.asarray(messages, dtype=np.float64).reshape(sampled.size, -1)
    k = state.num_arms
    if sampled.size and (sampled.min() < 0 or sampled.max() >= k):
        raise InputError("sampled arm out of range")
    p = state.probs if probs is None else np.asarray(probs, dtype=np.float64)
    est = np.zeros(k)
    for j, x in zip(sampled, X):
        est[j] += exp3_loss(x, p[j]) / p[j]
    est = np.clip(est / max(sampled.size, 1), -state.clip, state.clip)
    cum = state.cum_sq_loss + float(np.sum(est ** 2))
    eta = np.sqrt(np.log(max(k, 2)) / max(1.0, cum))
    logw = state.log_weights - eta * est
    return Exp3State(logw - logw.max(), state.epoch + 1, cum, state.explore, state.clip)


class Exp3Sampler:
    """Per-node Exp3 states over each node's full neighbour list."""

    def __init__(self, graph, explore=0.01, clip=1e4):
        self.graph = graph
        self.explore = explore
        self.clip = clip
        self.states = {}

    def state(self, node):
        st = self.states.get(node)
        if st is None:
            st = Exp3State.uniform(max(self.graph.degree(node), 1), self.explore, self.clip)
            self.states[node] = st
        return st

    def node_probs(self, node):
        if node not in self.states:
            d = max(self.graph.degree(node), 1)
            return np.full(d, 1.0 / d)
        return self.states[node].probs

    def _arms(self, node, candidates):
        return np.searchsorted(self.graph.neighbor_ids(node), candidates)

    def __call__(self, node, candidates):
        """Sampling distribution over ``candidates`` (a subset of the neighbours)."""
        p = self.node_probs(node)[self._arms(node, candidates)]
        return p / p.sum()

    def update(self, node, sampled_ids, candidates, messages):
        """Feed back messages from ``sampled_ids`` drawn out of ``candidates``."""
        full = self.node_probs(node)
        arms = self._arms(node, sampled_ids)
        cand_arms = self._arms(node, candidates)
        p = np.zeros_like(full)
        p[cand_arms] = full[cand_arms] / full[cand_arms].sum()
        self.states[node] = exp3_update(self.state(node), arms, messages, probs=p)


@dataclass
class VarianceSnapshot:
    importance_over_optimal: float
    uniform_over_optimal: float
    rho: float
    undefined: int = 0
    per_node: np.ndarray = field(repr=False, default=None)


def variance_ratios(messages, p_importance, tol=1e-12):
    """``(Var_imp / Var_opt, Var_unif / Var_opt, Var_imp / Var_unif)`` for one node.

    Ratios whose denominator vanishes (within ``tol`` of the second moment)
    are reported as 1.
    """
    X = _as_messages(messages)
    n = X.shape[0]
    if n < 2:
        return 1.0, 1.0, 1.0
    scale = max((X ** 2).sum(), 1e-300)
    v_opt = summed_variance(X, optimal_sampling_distribution(X))
    v_unif = summed_variance(X, np.full(n, 1.0 / n))
    v_imp = summed_variance(X, p_importance)

    def ratio(a, b):
        if b <= tol * scale:
            return 1.0 if a <= tol * scale else float("inf")
        return a / b

    return ratio(v_imp, v_opt), ratio(v_unif, v_opt), ratio(v_imp, v_unif)


def variance_snapshot(graph, log_messages, sampler=None):
    """Node-averaged variance ratios for the current messages and sampler.

    ``log_messages`` is the per-directed-edge message array of a full-graph
    BP pass; a node's incoming messages occupy its CSR range.  Without a
    sampler the importance distribution is uniform.  Nodes whose ratio is
    infinite (optimal variance zero, importance variance not) are left out of
    the averages and counted in ``undefined``.
    """
    rows = []
    for i in range(graph.num_nodes):
        lo, hi = graph.offsets[i], graph.offsets[i + 1]
        if hi - lo < 2:
            rows.append((1.0, 1.0, 1.0))
            continue
        p = sampler.node_probs(i) if sampler is not None else np.full(hi - lo, 1.0 / (hi - lo))
        rows.append(variance_ratios(log_messages[lo:hi], p))
    per_node = np.array(rows)
    finite = np.where(np.isfinite(per_node), per_node, np.nan)
    means = np.nanmean(finite, axis=0)
    undefined = int(np.sum(~np.isfinite(per_node).all(axis=1)))
    return VarianceSnapshot(float(means[0]), float(means[1]), float(means[2]), undefined, per_node)
