"""Synthetic benchmark generators: shape, wiring, and determinism checks."""

import numpy as np
import pytest

from umgad.synthetic import community_graph, regular_community_graph


def test_community_graph_shapes_and_determinism():
    g = community_graph(60, n_relations=3, n_communities=4, feature_dim=8,
                        seed=5)
    assert g.node_count == 60
    assert g.n_relations == 3
    assert g.attributes.shape == (60, 8)
    h = community_graph(60, n_relations=3, n_communities=4, feature_dim=8,
                        seed=5)
    assert np.array_equal(g.attributes, h.attributes)
    for a, b in zip(g.relations, h.relations):
        assert (a.adjacency != b.adjacency).nnz == 0
    k = community_graph(60, n_relations=3, n_communities=4, feature_dim=8,
                        seed=6)
    assert not np.array_equal(g.attributes, k.attributes)


def test_community_graph_relations_independent_draws():
    g = community_graph(80, n_relations=2, p_in=0.3, p_out=0.02, seed=0)
    assert (g.relations[0].adjacency != g.relations[1].adjacency).nnz > 0


def test_community_graph_rejects_too_many_communities():
    with pytest.raises(ValueError):
        community_graph(30, n_communities=9, feature_dim=8)


def test_regular_graph_degrees_and_block_isolation():
    g = regular_community_graph(50, n_relations=2, feature_dim=8,
                                sizes=[20, 20, 10], within_degree=2,
                                feature_noise=0.0, seed=1)
    # same block <-> identical clean mean row (noise off)
    mean_key = np.round(g.attributes, 9)
    for rel in g.relations:
        deg = np.asarray(rel.adjacency.sum(axis=1)).ravel()
        assert np.all(deg == 2)
        edges = rel.edge_array()
        same = np.all(mean_key[edges[:, 0]] == mean_key[edges[:, 1]], axis=1)
        assert same.all()


def test_regular_graph_means_centered_and_radii_scale():
    g = regular_community_graph(40, feature_dim=8, sizes=[12, 12, 16],
                                radii=[1.0, 1.0, 3.0], within_degree=1,
                                feature_scale=2.0, feature_noise=0.0, seed=3)
    # centering subtracts the unweighted mean of the community means
    col = g.attributes.mean(axis=0)
    assert np.all(np.abs(col) < 2.0 * np.sqrt(8))  # bounded, not huge
    norms = np.round(np.linalg.norm(g.attributes, axis=1), 6)
    lo, hi = np.unique(norms).min(), np.unique(norms).max()
    assert hi > lo  # the far block really sits further out


def test_regular_graph_determinism_and_seed_sensitivity():
    kw = dict(node_count=48, feature_dim=8, sizes=[24, 24], within_degree=2)
    a = regular_community_graph(seed=7, **kw)
    b = regular_community_graph(seed=7, **kw)
    c = regular_community_graph(seed=8, **kw)
    assert np.array_equal(a.attributes, b.attributes)
    for ra, rb in zip(a.relations, b.relations):
        assert (ra.adjacency != rb.adjacency).nnz == 0
    assert any((ra.adjacency != rc.adjacency).nnz > 0
               for ra, rc in zip(a.relations, c.relations))


def test_regular_graph_default_sizes_respect_parity():
    # n // 4 can be odd (500 -> 125); the default split must still give
    # every block an even stub count when within_degree is odd
    g = regular_community_graph(500, n_relations=1, feature_dim=16, seed=0)
    degrees = np.asarray(g.relations[0].adjacency.sum(axis=1)).ravel()
    assert g.node_count == 500
    assert (degrees == 1).all()


def test_regular_graph_validation():
    with pytest.raises(ValueError):
        regular_community_graph(50, sizes=[20, 20])          # sum != n
    with pytest.raises(ValueError):
        regular_community_graph(40, sizes=[20, 20], radii=[1.0])
    with pytest.raises(ValueError):
        regular_community_graph(40, sizes=[20, 20], within_degree=21)
    with pytest.raises(ValueError):
        # odd size * odd degree has no regular wiring
        regular_community_graph(35, sizes=[15, 20], within_degree=1)
    with pytest.raises(ValueError):
        regular_community_graph(40, feature_dim=4, sizes=[8] * 5)
