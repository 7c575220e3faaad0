"""Immutable undirected graph stored as paired directed edges in CSR layout.

Every undirected edge ``{i, j}`` is materialized twice, as ``i -> j`` and
``j -> i``.  Directed edges are sorted by ``(dst, src)`` so the incoming
edges of node ``i`` occupy ``offsets[i]:offsets[i + 1]``; ``reverse[e]`` is
the position of the twin of edge ``e``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    offsets: np.ndarray
    reverse: np.ndarray

    @property
    def num_directed_edges(self):
        return int(self.src.shape[0])

    @property
    def num_edges(self):
        """Number of undirected edges."""
        return self.num_directed_edges // 2

    @property
    def degrees(self):
        return np.diff(self.offsets)

    def degree(self, i):
        self._check_node(i)
        return int(self.offsets[i + 1] - self.offsets[i])

    def neighbors(self, i):
        """Return ``[(edge_index, neighbor_id), ...]`` in ascending neighbor order.

        ``edge_index`` is the outgoing edge ``i -> neighbor``.
        """
        self._check_node(i)
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return [(int(self.reverse[k]), int(self.src[k])) for k in range(lo, hi)]

    def neighbor_ids(self, i):
        """Neighbors of ``i`` as an int array (no bounds check)."""
        return self.src[self.offsets[i]:self.offsets[i + 1]]

    def undirected_edges(self):
        """``(m, 2)`` array of undirected edges with the smaller id first, sorted."""
        keep = self.src < self.dst
        pairs = np.stack([self.src[keep], self.dst[keep]], axis=1)
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        return pairs[order]

    def _check_node(self, i):
        if not (0 <= int(i) < self.num_nodes):
            raise InputError(f"node id {i} out of range [0, {self.num_nodes})")

    def __repr__(self):
        return f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges})"


def build_graph(num_nodes, undirected_edges):
    """Build a :class:`Graph` from an iterable of ``(u, v)`` pairs.

    Duplicate edges are merged regardless of orientation.  Self-loops and
    out-of-range endpoints raise :class:`InputError`.
    """
    num_nodes = int(num_nodes)
    if num_nodes < 0:
        raise InputError("num_nodes must be non-negative")
    edges = np.asarray(list(undirected_edges) if not isinstance(undirected_edges, np.ndarray)
                       else undirected_edges, dtype=np.int64)
    if edges.size == 0:
        edges = edges.reshape(0, 2)
    if edges.ndim != 2 or edges.shape[1] != 2:
        raise InputError("edges must be pairs of node ids")
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        bad = edges[(edges < 0).any(axis=1) | (edges >= num_nodes).any(axis=1)][0]
        raise InputError(f"edge {tuple(int(x) for x in bad)} has an endpoint outside [0, {num_nodes})")
    loops = edges[:, 0] == edges[:, 1]
    if loops.any():
        raise InputError(f"self-loop on node {int(edges[loops][0, 0])}")

    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    keys = np.unique(lo * num_nodes + hi)
    lo, hi = keys // max(num_nodes, 1), keys % max(num_nodes, 1)

    src = np.concatenate([lo, hi])
    dst = np.concatenate([hi, lo])
    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]

    sorted_keys = dst * num_nodes + src
    reverse = np.searchsorted(sorted_keys, src * num_nodes + dst)
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(dst, minlength=num_nodes), out=offsets[1:])

    return Graph(num_nodes, _frozen(src), _frozen(dst), _frozen(offsets), _frozen(reverse))


def grid_graph(rows, cols):
    """4-neighbour lattice; node ``r * cols + c`` sits at row ``r``, column ``c``."""
    if rows < 1 or cols < 1:
        raise InputError("grid dimensions must be >= 1")
    ids = np.arange(rows * cols).reshape(rows, cols)
    horiz = np.stack([ids[:, :-1].ravel(), ids[:, 1:].ravel()], axis=1)
    vert = np.stack([ids[:-1, :].ravel(), ids[1:, :].ravel()], axis=1)
    return build_graph(rows * cols, np.concatenate([horiz, vert]))


def degree(g, i):
    return g.degree(i)


def neighbors(g, i):
    return g.neighbors(i)


def random_tree(num_nodes, rng):
    """Uniform random recursive tree: node ``k`` attaches to a random earlier node."""
    if num_nodes < 1:
        raise InputError("a tree needs at least one node")
    parents = [int(rng.integers(0, k)) for k in range(1, num_nodes)]
    return build_graph(num_nodes, [(p, k) for k, p in enumerate(parents, start=1)])


def eccentricities(g):
    """BFS hop distance to the farthest reachable node, per node."""
    out = np.zeros(g.num_nodes, dtype=np.int64)
    for s in range(g.num_nodes):
        dist = {s: 0}
        frontier = [s]
        while frontier:
            nxt = []
            for u in frontier:
                for v in g.neighbor_ids(u):
                    v = int(v)
                    if v not in dist:
                        dist[v] = dist[u] + 1
                        nxt.append(v)
            frontier = nxt
        out[s] = max(dist.values())
    return out


def diameter(g):
    return int(eccentricities(g).max()) if g.num_nodes else 0
