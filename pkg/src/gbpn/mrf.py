"""Ground-truth pairwise MRFs: exact enumeration, MCMC samplers, synthetic data.

The joint over labels is ``phi(y) = prod_i h_i(y_i) * prod_{(i,j) in E} H[y_i, y_j]``
with one symmetric coupling matrix ``H`` shared by every edge.  Everything
here works with ``log h`` and ``log H``.
"""

from dataclasses import dataclass

import numba
import numpy as np

from .dataio import GraphBundle, split_nodes
from .errors import CapacityError, InputError
from .graph import Graph, grid_graph

MAX_ENUMERATION = 2 ** 24
KINDS = ("ising+", "ising-", "mrf+", "mrf-")
DEFAULT_COUPLING = 0.3
DEFAULT_BURN_IN = 1000


@dataclass(frozen=True, eq=False)
class MrfSpec:
    graph: Graph
    self_log_potentials: np.ndarray
    log_coupling: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.self_log_potentials, dtype=np.float64)
        L = np.asarray(self.log_coupling, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] != self.graph.num_nodes:
            raise InputError(f"self potentials must be ({self.graph.num_nodes}, c), got {h.shape}")
        if L.shape != (h.shape[1], h.shape[1]):
            raise InputError(f"coupling must be {h.shape[1]}x{h.shape[1]}, got {L.shape}")
        if not np.allclose(L, L.T, rtol=0, atol=1e-12):
            raise InputError("coupling matrix must be symmetric")
        object.__setattr__(self, "self_log_potentials", h)
        object.__setattr__(self, "log_coupling", L)

    @property
    def num_classes(self):
        return int(self.log_coupling.shape[0])

    @property
    def num_nodes(self):
        return self.graph.num_nodes


def _edge_pairs(graph):
    keep = graph.src < graph.dst
    return graph.src[keep], graph.dst[keep]


def log_unnormalized(spec, y):
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (spec.num_nodes,) or (y.size and (y.min() < 0 or y.max() >= spec.num_classes)):
        raise InputError("invalid label configuration")
    u, v = _edge_pairs(spec.graph)
    nodes = spec.self_log_potentials[np.arange(spec.num_nodes), y].sum()
    return float(nodes + spec.log_coupling[y[u], y[v]].sum())


def _configs(free, c, start, stop):
    """Rows ``start..stop-1`` of the mixed-radix enumeration over ``free`` nodes."""
    codes = np.arange(start, stop, dtype=np.int64)
    out = np.empty((codes.size, len(free)), dtype=np.int64)
    for k in range(len(free) - 1, -1, -1):
        out[:, k] = codes % c
        codes //= c
    return out


def exact_marginals(spec, clamped=None, chunk=1 << 16):
    """Conditional node marginals by brute-force enumeration.

    ``clamped`` maps node id to a fixed class.  Raises :class:`CapacityError`
    when more than ``2**24`` configurations would be enumerated.
    """
    clamped = dict(clamped or {})
    n, c = spec.num_nodes, spec.num_classes
    for i, k in clamped.items():
        if not (0 <= i < n and 0 <= k < c):
            raise InputError(f"invalid clamp {i} -> {k}")
    free = [i for i in range(n) if i not in clamped]
    total = c ** len(free)
    if total > MAX_ENUMERATION:
        raise CapacityError(f"{c}^{len(free)} configurations exceed the {MAX_ENUMERATION} guard")

    u, v = _edge_pairs(spec.graph)
    h, L = spec.self_log_potentials, spec.log_coupling
    base = np.zeros(n, dtype=np.int64)
    for i, k in clamped.items():
        base[i] = k

    shift = -np.inf
    acc = np.zeros((n, c))
    for start in range(0, total, chunk):
        ys = np.broadcast_to(base, (min(chunk, total - start), n)).copy()
        if free:
            ys[:, free] = _configs(free, c, start, min(start + chunk, total))
        logw = h[np.arange(n), ys].sum(axis=1) + L[ys[:, u], ys[:, v]].sum(axis=1)
        m = logw.max()
        if m > shift:
            acc *= np.exp(shift - m) if np.isfinite(shift) else 0.0
            shift = m
        w = np.exp(logw - shift)
        for k in range(c):
            acc[:, k] += w @ (ys == k)
    return acc / acc.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# samplers


@numba.njit(cache=True)
def _gibbs_sweep(y, offsets, nbr, h, L, u):
    n, c = h.shape
    logits = np.empty(c)
    for i in range(n):
        for k in range(c):
            s = h[i, k]
            for e in range(offsets[i], offsets[i + 1]):
                s += L[k, y[nbr[e]]]
            logits[k] = s
        m = logits.max()
        z = 0.0
        for k in range(c):
            logits[k] = np.exp(logits[k] - m)
            z += logits[k]
        target = u[i, 0] * z
        acc = 0.0
        choice = c - 1
        for k in range(c):
            acc += logits[k]
            if target < acc:
                choice = k
                break
        y[i] = choice


@numba.njit(cache=True)
def _metropolis_sweep(y, offsets, nbr, h, L, u):
    n, c = h.shape
    for i in range(n):
        old = y[i]
        new = (old + 1 + int(u[i, 0] * (c - 1))) % c
        delta = h[i, new] - h[i, old]
        for e in range(offsets[i], offsets[i + 1]):
            yj = y[nbr[e]]
            delta += L[new, yj] - L[old, yj]
        if u[i, 1] < np.exp(delta):
            y[i] = new


def metropolis_accept(delta_log_phi, u):
    """Accept rule ``u < min(1, exp(delta))`` for a uniform draw ``u`` in [0, 1)."""
    return bool(u < np.exp(delta_log_phi))


def _run_chain(sweep, spec, num_sweeps, burn_in, seed):
    if num_sweeps < 1:
        raise InputError("num_sweeps must be >= 1")
    if burn_in < 0:
        raise InputError("burn_in must be >= 0")
    rng = np.random.default_rng(seed)
    g = spec.graph
    n, c = spec.num_nodes, spec.num_classes
    y = rng.integers(0, c, size=n).astype(np.int64)
    h = np.ascontiguousarray(spec.self_log_potentials)
    L = np.ascontiguousarray(spec.log_coupling)
    offsets = np.asarray(g.offsets, dtype=np.int64)
    nbr = np.asarray(g.src, dtype=np.int64)
    out = np.empty((num_sweeps, n), dtype=np.int64)
    for t in range(burn_in + num_sweeps):
        sweep(y, offsets, nbr, h, L, rng.random((n, 2)))
        if t >= burn_in:
            out[t - burn_in] = y
    return out


def gibbs_sample(spec, num_sweeps, burn_in=DEFAULT_BURN_IN, seed=0):
    """Systematic-scan Gibbs sampler; returns ``(num_sweeps, n)`` configurations."""
    return _run_chain(_gibbs_sweep, spec, num_sweeps, burn_in, seed)


def metropolis_sample(spec, num_sweeps, burn_in=DEFAULT_BURN_IN, seed=0):
    """Single-site Metropolis in node order.

    The proposal moves a site to one of the other ``c - 1`` classes uniformly
    (a flip when ``c == 2``).
    """
    return _run_chain(_metropolis_sweep, spec, num_sweeps, burn_in, seed)


def empirical_marginals(samples, num_classes):
    samples = np.asarray(samples)
    return np.stack([(samples == k).mean(axis=0) for k in range(num_classes)], axis=1)


# ---------------------------------------------------------------------------
# synthetic datasets


def grid_coordinates(rows, cols):
    """Per-node ``(r1, r2)`` grid coordinates scaled to [-1, 1]."""
    def axis(n):
        return np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
    r1, r2 = np.meshgrid(axis(rows), axis(cols), indexing="ij")
    return np.stack([r1.ravel(), r2.ravel()], axis=1)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def synthetic_self_potentials(kind, coords):
    r1, r2 = coords[:, 0], coords[:, 1]
    if kind in ("ising+", "ising-"):
        # both Ising variants share the same field
        f = 0.35 * r1 * r2
        return np.stack([-f, f], axis=1)
    if kind == "mrf+":
        temp, offset = 0.2, 0.65
    elif kind == "mrf-":
        temp, offset = 0.6, 0.0
    else:
        raise InputError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    s1 = r1 ** 2 + r2 ** 2 - offset
    s = np.stack([np.zeros_like(s1), s1, -s1], axis=1)
    return _log_sigmoid(temp * s)


def synthetic_coupling(kind, strength=DEFAULT_COUPLING):
    if kind not in KINDS:
        raise InputError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    c = 2 if kind.startswith("ising") else 3
    L = np.where(np.eye(c, dtype=bool), strength, -strength).astype(np.float64)
    return L if kind.endswith("+") else -L


def synthetic_spec(kind, rows, cols, coupling_strength=DEFAULT_COUPLING):
    if kind not in KINDS:
        raise InputError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    coords = grid_coordinates(rows, cols)
    return MrfSpec(grid_graph(rows, cols), synthetic_self_potentials(kind, coords),
                   synthetic_coupling(kind, coupling_strength))


def generate_dataset(kind, rows=51, cols=51, coupling_strength=DEFAULT_COUPLING, seed=0,
                     burn_in=DEFAULT_BURN_IN, ratios=(0.3, 0.2, 0.5)):
    """Sample one labelling from a synthetic MRF and package it as a bundle.

    Ising kinds use Metropolis, the 3-class kinds Gibbs.  Features are the
    normalized grid coordinates.
    """
    spec = synthetic_spec(kind, rows, cols, coupling_strength)
    chain_seed, split_seed = np.random.SeedSequence(seed).generate_state(2)
    sampler = metropolis_sample if kind.startswith("ising") else gibbs_sample
    labels = sampler(spec, 1, burn_in=burn_in, seed=int(chain_seed))[0]
    splits = split_nodes(spec.num_nodes, ratios, seed=int(split_seed))
    meta = {"kind": kind, "rows": rows, "cols": cols, "coupling": coupling_strength,
            "seed": seed, "burn_in": burn_in}
    return GraphBundle(spec.graph, grid_coordinates(rows, cols), labels, splits,
                       spec.num_classes, meta)


def edge_agreement(graph, labels):
    """Fraction of undirected edges whose endpoints share a label."""
    if graph.num_edges == 0:
        return float("nan")
    u, v = _edge_pairs(graph)
    return float(np.mean(labels[u] == labels[v]))
