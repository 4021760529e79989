"""Synthetic multiplex benchmarks: community structure, Gaussian features.

Used by the demos and the test-suite; anomaly injection on top of these
graphs lives in umgad.detect.inject_anomalies.
"""

from __future__ import annotations

import numpy as np

from .autodiff import RngStream
from .graph import MultiplexGraph, RelationalSubgraph, build_adjacency


def community_graph(node_count, n_relations=2, n_communities=4,
                    feature_dim=16, p_in=0.08, p_out=0.005,
                    feature_scale=1.0, feature_noise=0.3, seed=0):
    """Multiplex SBM: every relation has its own edge draw over shared blocks.

    Node attributes are community means plus isotropic Gaussian noise. The
    means are mutually orthogonal directions of equal norm (feature_scale
    per dimension on average), so every row has about the same Euclidean
    norm and geometry separates communities purely by direction. Attribute
    anomalies that copy far-away rows then break community consistency and
    structural cliques cut across blocks.
    """
    if n_communities > feature_dim:
        raise ValueError("need n_communities <= feature_dim for "
                         "orthogonal community means")
    rng = RngStream(seed, "synthetic")
    gen = rng.child("communities").generator()
    communities = gen.integers(0, n_communities, size=node_count)

    relations = []
    for r in range(n_relations):
        gen = rng.child(f"edges/r={r}").generator()
        # Bernoulli block model on the upper triangle.
        iu, ju = np.triu_indices(node_count, k=1)
        same = communities[iu] == communities[ju]
        prob = np.where(same, p_in, p_out)
        keep = gen.random(iu.size) < prob
        edges = np.column_stack([iu[keep], ju[keep]])
        adj, e = build_adjacency(edges, node_count, name=f"rel{r}")
        relations.append(RelationalSubgraph(r, f"rel{r}", adj, e))

    gen = rng.child("features").generator()
    basis, _ = np.linalg.qr(gen.normal(size=(feature_dim, feature_dim)))
    means = (basis[:n_communities]
             * feature_scale * np.sqrt(feature_dim))
    attributes = (means[communities]
                  + gen.normal(0.0, feature_noise,
                               size=(node_count, feature_dim)))
    return MultiplexGraph(relations, attributes)


def _regular_edges(members, degree, gen):
    """Random simple degree-regular graph on members, by stub matching."""
    m = members.size
    if degree >= m:
        raise ValueError("within_degree must be < community size")
    if (m * degree) % 2:
        raise ValueError("community size * within_degree must be even")
    for _ in range(500):
        stubs = np.repeat(np.arange(m), degree)
        gen.shuffle(stubs)
        a, b = stubs[0::2], stubs[1::2]
        if (a == b).any():
            continue
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        key = lo * m + hi
        if np.unique(key).size != key.size:
            continue
        return np.column_stack([members[a], members[b]])
    raise ValueError("failed to sample a simple regular graph")


def regular_community_graph(node_count=500, n_relations=2, feature_dim=16,
                            sizes=None, radii=None, within_degree=1,
                            feature_scale=1.0, feature_noise=0.1, seed=0):
    """Multiplex benchmark with degree-regular blocks and tunable norms.

    Communities are disjoint blocks; every relation wires each block
    internally as an independent random within_degree-regular graph and
    adds no cross-block edges at all, so injected cliques become the only
    structure that crosses blocks. Community k's attribute mean points
    along coordinate axis k with norm radii[k] * feature_scale *
    sqrt(feature_dim) before centering; unequal radii let a block sit far
    from the rest in feature space, and unequal sizes control how many
    rows live out there. Degree-regular wiring keeps every node's
    neighbourhood statistics identical inside a block, which makes the
    residual landscape flat for unlabeled nodes.
    """
    if sizes is None:
        base = node_count // 4
        if within_degree % 2 and base % 2:
            base -= 1  # odd-degree blocks need an even stub count
        sizes = [base] * 3 + [node_count - 3 * base]
    sizes = np.asarray(sizes, dtype=np.int64)
    if sizes.sum() != node_count:
        raise ValueError("sizes must sum to node_count")
    n_communities = sizes.size
    if radii is None:
        radii = np.ones(n_communities)
    radii = np.asarray(radii, dtype=np.float64)
    if radii.size != n_communities:
        raise ValueError("need one radius per community")
    if n_communities > feature_dim:
        raise ValueError("need len(sizes) <= feature_dim for "
                         "axis-aligned community means")

    rng = RngStream(seed, "synthetic")
    gen = rng.child("communities").generator()
    communities = gen.permutation(np.repeat(np.arange(n_communities), sizes))

    relations = []
    for r in range(n_relations):
        gen = rng.child(f"edges/r={r}").generator()
        edges = []
        for c in range(n_communities):
            members = np.where(communities == c)[0]
            edges.append(_regular_edges(members, within_degree, gen))
        adj, e = build_adjacency(np.concatenate(edges), node_count,
                                 name=f"rel{r}")
        relations.append(RelationalSubgraph(r, f"rel{r}", adj, e))

    gen = rng.child("features").generator()
    means = np.zeros((n_communities, feature_dim))
    means[np.arange(n_communities), np.arange(n_communities)] = (
        radii * feature_scale * np.sqrt(feature_dim))
    means = means - means.mean(axis=0)
    attributes = (means[communities]
                  + gen.normal(0.0, feature_noise,
                               size=(node_count, feature_dim)))
    return MultiplexGraph(relations, attributes)
