import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbpn.errors import InputError
from gbpn.graph import build_graph, grid_graph


def test_path_graph():
    g = build_graph(3, [(0, 1), (1, 2)])
    assert g.num_directed_edges == 4
    assert [g.degree(i) for i in range(3)] == [1, 2, 1]


def test_duplicate_edges_merged():
    g = build_graph(2, [(0, 1), (1, 0)])
    assert g.num_directed_edges == 2


def test_grid_counts():
    g = grid_graph(3, 3)
    assert g.num_nodes == 9
    assert g.num_edges == 12
    assert g.num_directed_edges == 24
    assert g.degree(4) == 4
    assert g.degree(0) == 2


def test_isolated_node():
    g = build_graph(3, [(0, 1)])
    assert g.degree(2) == 0
    assert g.neighbors(2) == []


def test_neighbors_order_and_edge_ids():
    g = build_graph(3, [(1, 2), (0, 1)])
    nb = g.neighbors(1)
    assert [j for _, j in nb] == [0, 2]
    for e, j in nb:
        assert (g.src[e], g.dst[e]) == (1, j)
        twin = g.reverse[e]
        assert (g.src[twin], g.dst[twin]) == (j, 1)
    assert len(grid_graph(3, 3).neighbors(4)) == 4


@pytest.mark.parametrize("edges", [[(0, 0)], [(0, 3)], [(-1, 1)]])
def test_bad_edges_rejected(edges):
    with pytest.raises(InputError):
        build_graph(3, edges)


def test_out_of_range_queries():
    g = build_graph(2, [(0, 1)])
    with pytest.raises(InputError):
        g.degree(2)
    with pytest.raises(InputError):
        g.neighbors(-1)


def test_large_grid_formula():
    g = grid_graph(51, 51)
    assert g.num_nodes == 2601
    assert g.num_edges == 51 * 50 * 2
    assert grid_graph(1, 2).num_edges == 1


edge_lists = st.integers(2, 12).flatmap(
    lambda n: st.tuples(
        st.just(n),
        st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))
                 .filter(lambda e: e[0] != e[1]), max_size=40)))


@settings(max_examples=80, deadline=None)
@given(edge_lists)
def test_structural_invariants(case):
    n, edges = case
    g = build_graph(n, edges)
    expected = {(min(u, v), max(u, v)) for u, v in edges}
    assert {tuple(e) for e in g.undirected_edges().tolist()} == expected

    rev = g.reverse
    idx = np.arange(g.num_directed_edges)
    assert np.all(rev[rev] == idx)
    assert not np.any(rev == idx)
    assert np.all(g.src[rev] == g.dst) and np.all(g.dst[rev] == g.src)

    assert np.all(np.diff(g.offsets) >= 0)
    assert g.offsets[0] == 0 and g.offsets[-1] == g.num_directed_edges
    assert g.degrees.sum() == g.num_directed_edges
    for i in range(n):
        assert np.all(g.dst[g.offsets[i]:g.offsets[i + 1]] == i)
