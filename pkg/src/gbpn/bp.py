"""Log-space loopy belief propagation on :class:`~gbpn.graph.Graph`.

Messages live on directed edges: row ``e`` of ``log_messages`` is the
message ``src[e] -> dst[e]`` as a distribution over the receiver's class.
Updates follow a synchronous (flooding) schedule and every row is
renormalized after each step.  All arithmetic goes through
:mod:`gbpn.autodiff`, so a forward pass on a tape is differentiable.

Clamped nodes carry one-hot beliefs encoded with the finite ``LOG_ZERO``
sentinel; their rows are re-imposed after every step.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InputError

LOG_ZERO = -1e9


def clamp_arrays(num_nodes, num_classes, clamped):
    """Row mask (1 = free) and additive constant realizing ``clamped``."""
    keep = np.ones((num_nodes, 1))
    const = np.zeros((num_nodes, num_classes))
    if clamped:
        ids = np.fromiter(clamped.keys(), dtype=np.int64, count=len(clamped))
        cls = np.fromiter(clamped.values(), dtype=np.int64, count=len(clamped))
        if ids.min() < 0 or ids.max() >= num_nodes or cls.min() < 0 or cls.max() >= num_classes:
            raise InputError("clamp refers to an invalid node or class")
        keep[ids] = 0.0
        const[ids] = LOG_ZERO
        const[ids, cls] = 0.0
    return keep, const


def apply_clamps(log_beliefs, keep, const):
    if keep is None:
        return log_beliefs
    return ad.add(ad.mul(log_beliefs, keep), const)


@dataclass
class BeliefState:
    graph: object
    log_self: ad.Tensor
    log_beliefs: ad.Tensor
    log_messages: ad.Tensor
    iteration: int = 0
    clamped: dict = None
    keep: np.ndarray = None
    const: np.ndarray = None

    @property
    def beliefs(self):
        return np.exp(self.log_beliefs.value)


def init_state(graph, log_self_beliefs, clamped=None):
    """Initial state: uniform messages, beliefs equal to the self-beliefs.

    Clamped nodes (``{node: class}``) get one-hot beliefs.
    """
    log_self = ad.as_tensor(log_self_beliefs)
    if log_self.value.ndim != 2 or log_self.value.shape[0] != graph.num_nodes:
        raise InputError(f"self-beliefs must be ({graph.num_nodes}, c), got {log_self.value.shape}")
    c = log_self.value.shape[1]
    keep = const = None
    if clamped:
        keep, const = clamp_arrays(graph.num_nodes, c, clamped)
        log_self = apply_clamps(log_self, keep, const)
    messages = ad.constant(np.full((graph.num_directed_edges, c), -np.log(c)))
    return BeliefState(graph, log_self, log_self, messages, 0, dict(clamped or {}), keep, const)


def log_matvec(log_x, log_coupling):
    """``out[k, b] = LSE_a(log_x[k, a] + log_coupling[a, b])``."""
    c = log_x.value.shape[1]
    terms = ad.add(ad.reshape(log_x, (-1, c, 1)), ad.reshape(log_coupling, (1, c, c)))
    return ad.logsumexp(terms, axis=1)


def bp_step(state, log_coupling):
    g = state.graph
    log_coupling = ad.as_tensor(log_coupling)
    c = state.log_beliefs.value.shape[1]
    if log_coupling.value.shape != (c, c):
        raise InputError(f"coupling must be {c}x{c}")
    if g.num_directed_edges == 0:
        return BeliefState(g, state.log_self, state.log_beliefs, state.log_messages,
                           state.iteration + 1, state.clamped, state.keep, state.const)
    # cavity: sender belief without the receiver's own message
    cavity = ad.sub(ad.gather_rows(state.log_beliefs, g.src),
                    ad.gather_rows(state.log_messages, g.reverse))
    messages = ad.log_softmax_rows(log_matvec(cavity, log_coupling))
    incoming = ad.segment_sum(messages, g.dst, g.num_nodes)
    beliefs = ad.log_softmax_rows(ad.add(state.log_self, incoming))
    beliefs = apply_clamps(beliefs, state.keep, state.const)
    return BeliefState(g, state.log_self, beliefs, messages, state.iteration + 1,
                       state.clamped, state.keep, state.const)


def run_bp(graph, log_self_beliefs, log_coupling, T, clamped=None, keep_trajectory=False):
    """Run ``T`` synchronous BP steps.

    Returns ``(state, trajectory)``; ``trajectory`` lists the log-belief
    arrays for ``t = 0..T`` when ``keep_trajectory`` is set, else ``None``.
    """
    if T < 0:
        raise InputError("T must be >= 0")
    state = init_state(graph, log_self_beliefs, clamped)
    trajectory = [state.log_beliefs.value.copy()] if keep_trajectory else None
    for _ in range(T):
        state = bp_step(state, log_coupling)
        if keep_trajectory:
            trajectory.append(state.log_beliefs.value.copy())
    return state, trajectory


def residual_trace(trajectory, ord=2):
    """Mean per-node distance (probability space) of each snapshot to the last one."""
    if len(trajectory) < 2:
        raise InputError("trajectory needs at least two snapshots")
    final = np.exp(trajectory[-1])
    return np.array([np.linalg.norm(np.exp(b) - final, ord=ord, axis=1).mean()
                     for b in trajectory])


# ---------------------------------------------------------------------------
# computation trees


@dataclass
class ComputationTree:
    """One or more unrolled computation trees stored level by level.

    ``orig[k]`` is the graph node behind tree node ``k``; ``parent[k]`` its
    tree parent (-1 for roots); ``weight[k]`` scales its message into the
    parent.  Nodes are sorted by level, so ``level_offsets[l]`` slices level
    ``l``.  ``roots`` are the tree indices of level 0.
    """

    orig: np.ndarray
    parent: np.ndarray
    weight: np.ndarray
    level_offsets: np.ndarray

    @property
    def depth(self):
        return len(self.level_offsets) - 2

    @property
    def roots(self):
        return np.arange(self.level_offsets[0], self.level_offsets[1])

    @property
    def num_nodes(self):
        return int(self.orig.shape[0])

    def level(self, l):
        return slice(int(self.level_offsets[l]), int(self.level_offsets[l + 1]))


def _expand(graph, node, exclude, fanout, rng, probs):
    cand = graph.neighbor_ids(node)
    if exclude >= 0:
        cand = cand[cand != exclude]
    if cand.size <= fanout:
        return cand, np.ones(cand.size), False
    if probs is None:
        picked = rng.choice(cand.size, size=fanout, replace=False)
        return cand[picked], np.ones(fanout), True
    p = probs(node, cand)
    picked = rng.choice(cand.size, size=fanout, replace=True, p=p)
    return cand[picked], 1.0 / (cand.size * p[picked]), True


def sample_forest(graph, roots, depth, fanout, rng, probs=None, on_expand=None):
    """Unroll ``depth`` levels below each root, keeping at most ``fanout`` children.

    Children exclude the tree parent's graph node.  With ``probs=None`` the
    children are a uniform sample without replacement and carry weight 1.
    Otherwise ``probs(node, candidates)`` gives a sampling distribution; the
    ``fanout`` children are i.i.d. draws weighted by ``1 / (|candidates| p_j)``.
    ``on_expand(tree_index, node, candidates_sampled)`` is called for each
    subsampled expansion.
    """
    if depth < 1 or fanout < 1:
        raise InputError("depth and fanout must be >= 1")
    roots = np.asarray(roots, dtype=np.int64)
    orig = [roots]
    parent = [np.full(roots.size, -1, dtype=np.int64)]
    weight = [np.ones(roots.size)]
    parent_orig = np.full(roots.size, -1, dtype=np.int64)
    start = 0
    for _ in range(depth):
        cur = orig[-1]
        o, p, w, po = [], [], [], []
        for k, node in enumerate(cur):
            kids, kw, subsampled = _expand(graph, int(node), int(parent_orig[k]), fanout, rng, probs)
            if subsampled and on_expand is not None:
                on_expand(start + k, int(node), kids)
            o.append(kids)
            p.append(np.full(kids.size, start + k, dtype=np.int64))
            w.append(kw)
            po.append(np.full(kids.size, node, dtype=np.int64))
        start += cur.size
        orig.append(np.concatenate(o) if o else np.zeros(0, dtype=np.int64))
        parent.append(np.concatenate(p) if p else np.zeros(0, dtype=np.int64))
        weight.append(np.concatenate(w) if w else np.zeros(0))
        parent_orig = np.concatenate(po) if po else np.zeros(0, dtype=np.int64)
    offsets = np.cumsum([0] + [a.size for a in orig])
    return ComputationTree(np.concatenate(orig).astype(np.int64), np.concatenate(parent),
                           np.concatenate(weight), offsets)


def sample_tree(graph, root, depth, fanout, rng, probs=None):
    graph._check_node(root)
    return sample_forest(graph, [root], depth, fanout, rng, probs)


def tree_bp(tree, log_self_beliefs, log_coupling, weights=None, clamped=None, return_messages=False):
    """Root log-beliefs of every tree in ``tree``, computed leaves to root.

    Parent exclusion replaces the division term of loopy BP, so a full
    unrolled tree reproduces ``depth`` flooding steps exactly.  ``weights``
    overrides the per-node weights stored in the tree.
    """
    log_self = ad.as_tensor(log_self_beliefs)
    log_coupling = ad.as_tensor(log_coupling)
    c = log_self.value.shape[1]
    w = tree.weight if weights is None else np.asarray(weights, dtype=np.float64)
    keep = const = None
    if clamped:
        keep_n, const_n = clamp_arrays(log_self.value.shape[0], c, clamped)
        keep, const = keep_n[tree.orig], const_n[tree.orig]

    def belief(l, incoming):
        sl = tree.level(l)
        b = ad.gather_rows(log_self, tree.orig[sl])
        if incoming is not None:
            b = ad.add(b, incoming)
        b = ad.log_softmax_rows(b)
        if keep is not None:
            b = apply_clamps(b, keep[sl], const[sl])
        return b

    incoming = None
    messages = {}
    for l in range(tree.depth, 0, -1):
        sl = tree.level(l)
        if sl.stop == sl.start:
            incoming = None
            continue
        b = belief(l, incoming)
        msg = ad.log_softmax_rows(log_matvec(b, log_coupling))
        messages[l] = msg
        parents = tree.parent[sl] - tree.level_offsets[l - 1]
        n_parent = int(tree.level_offsets[l] - tree.level_offsets[l - 1])
        weighted = ad.mul(msg, w[sl][:, None])
        incoming = ad.segment_sum(weighted, parents, n_parent)
    root = belief(0, incoming)
    return (root, messages) if return_messages else root
