"""Plan construction for masking and augmentation.

Planning is pure bookkeeping: which nodes get the mask token, which edges are
hidden, which rows are swapped, which subgraphs are resampled. Plans are
recomputed every epoch (and freshly at scoring time) from labeled RNG
streams, so two branches never share draws and dropping one view never
shifts another view's plans.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import mask_rows
from .errors import ConfigError, EmptyRelation, ShapeMismatch


def round_half_up(x):
    """round() with .5 going up, so ratio*count is stable across platforms."""
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class MaskConfig:
    mask_ratio: float = 0.2
    repeats: int = 10      # K
    n_neg: int = 5         # negatives per hidden edge

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio {self.mask_ratio} outside [0, 1]")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.n_neg < 1:
            raise ConfigError("n_neg must be >= 1")


@dataclass(frozen=True)
class RwrConfig:
    restart_prob: float = 0.15
    subgraph_size: int = 8
    max_steps: int = 0     # 0 -> 100 * subgraph_size

    def __post_init__(self):
        if not 0.0 <= self.restart_prob <= 1.0:
            raise ConfigError("restart_prob outside [0, 1]")
        if self.subgraph_size < 1:
            raise ConfigError("subgraph_size must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")

    @property
    def step_budget(self):
        return self.max_steps if self.max_steps else 100 * self.subgraph_size


@dataclass
class EdgeMask:
    """Hidden undirected edges for one (relation, repeat) branch."""
    edges: np.ndarray       # (E, 2), rows (v, u)
    negatives: np.ndarray   # (E, n_neg) corrupted endpoints u'
    fallback: np.ndarray    # (E,) bool, True where exhaustion forced u' != u


@dataclass
class MaskPlan:
    """Node part (shared across relations per repeat) and edge part (per r, k)."""
    node_sets: list[np.ndarray] | None = None        # per k, sorted node ids
    edges: dict[tuple[int, int], EdgeMask] = field(default_factory=dict)


@dataclass
class RwrSubgraph:
    nodes: np.ndarray       # visited node set, sorted
    edges: np.ndarray       # induced undirected edges (E, 2), u < v
    negatives: np.ndarray   # (E, n_neg)
    fallback: np.ndarray    # (E,) bool


@dataclass
class AugmentPlan:
    """Attribute swap part (per repeat) and subgraph part (per r, k)."""
    swap_targets: list[np.ndarray] | None = None   # per k, sorted node ids
    swap_donors: list[np.ndarray] | None = None    # per k, donor per target
    subgraphs: dict[tuple[int, int], RwrSubgraph] = field(default_factory=dict)


def plan_attribute_masks(g, cfg, rng):
    """K node sets of size round_half_up(mask_ratio * |V|), no replacement."""
    size = round_half_up(cfg.mask_ratio * g.node_count)
    sets = []
    for k in range(cfg.repeats):
        gen = rng.child(f"attr_mask/k={k}").generator()
        sets.append(np.sort(gen.choice(g.node_count, size=size, replace=False)))
    return MaskPlan(node_sets=sets)


def _sample_noneighbors(gen, forbidden_sorted, node_count, size):
    """size draws uniform over [0, node_count) minus a sorted forbidden set.

    Draws rank the complement; ranks map back to node ids by counting how
    many forbidden ids fall at or below each landing spot.
    """
    free = node_count - forbidden_sorted.size
    draws = gen.integers(0, free, size=size)
    adjusted = forbidden_sorted - np.arange(forbidden_sorted.size)
    return draws + np.searchsorted(adjusted, draws, side="right")


def _edge_negatives(gen, rel, anchors, others, n_neg):
    """Per anchor v: n_neg endpoints u' with (v, u') not an edge and u' != v.

    One bounded draw per (edge, negative); ranks over the complement of the
    closed neighborhood map back to ids by the same counting trick as
    _sample_noneighbors, batched over rows. If v is adjacent to every other
    node the draw falls back to u' != u (u = the true endpoint), flagged.
    """
    n = rel.adjacency.shape[0]
    e = anchors.size
    if e == 0:
        return np.zeros((0, n_neg), dtype=np.int64), np.zeros(0, dtype=bool)
    mat, sizes = rel.closed_neighborhoods()
    m = sizes[anchors]
    fallback = m >= n
    rows = mat[anchors]
    if fallback.any():
        rows[fallback] = 2 * n
        rows[fallback, 0] = others[fallback]
        m = np.where(fallback, 1, m)
    draws = gen.integers(0, (n - m)[:, None], size=(e, n_neg))
    adjusted = rows - np.arange(rows.shape[1])[None, :]  # pad stays >= n
    count = np.sum(adjusted[:, None, :] <= draws[:, :, None], axis=2)
    return draws + count, fallback


def plan_edge_masks(g, cfg, rng):
    """Per (r, k): round_half_up(mask_ratio * E_r) hidden edges + negatives."""
    plan = MaskPlan(node_sets=None)
    for r, rel in enumerate(g.relations):
        if rel.edge_count == 0:
            raise EmptyRelation(f"relation {rel.name} has no edges to mask")
        edges = rel.edge_array()
        size = round_half_up(cfg.mask_ratio * rel.edge_count)
        for k in range(cfg.repeats):
            gen = rng.child(f"edge_mask/r={r}/k={k}").generator()
            pick = gen.choice(rel.edge_count, size=size, replace=False)
            chosen = edges[np.sort(pick)]
            negs, fb = _edge_negatives(
                gen, rel, chosen[:, 0], chosen[:, 1], cfg.n_neg)
            plan.edges[(r, k)] = EdgeMask(chosen, negs, fb)
    return plan


def plan_attribute_augmentation(g, cfg, rng):
    """K swap maps: targets without replacement, donor uniform != target."""
    size = round_half_up(cfg.mask_ratio * g.node_count)
    targets, donors = [], []
    for k in range(cfg.repeats):
        gen = rng.child(f"swap/k={k}").generator()
        t = np.sort(gen.choice(g.node_count, size=size, replace=False))
        d = gen.integers(0, g.node_count - 1, size=size)
        d = d + (d >= t)  # shift past the target itself
        targets.append(t)
        donors.append(d.astype(np.int64))
    return AugmentPlan(swap_targets=targets, swap_donors=donors)


def _rwr_walk(gen, rel, size, restart_prob, step_budget):
    starts = np.flatnonzero(np.diff(rel.adjacency.indptr) > 0)
    if starts.size == 0:
        raise EmptyRelation(f"relation {rel.name} has no edges")
    seed = int(starts[gen.integers(0, starts.size)])
    visited = {seed}
    current = seed
    steps = 0
    while len(visited) < size and steps < step_budget:
        steps += 1
        if gen.random() < restart_prob:
            current = seed
            continue
        nbrs = rel.neighbors(current)
        current = int(nbrs[gen.integers(0, nbrs.size)])
        visited.add(current)
    return np.array(sorted(visited), dtype=np.int64)


def _induced_edges(rel, nodes):
    inside = np.zeros(rel.adjacency.shape[0], dtype=bool)
    inside[nodes] = True
    out = []
    for u in nodes:
        for v in rel.neighbors(int(u)):
            if u < v and inside[v]:
                out.append((int(u), int(v)))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def sample_rwr_subgraphs(g, cfg, mask_cfg, rng):
    """Per (r, k): a random-walk-with-restart subgraph plus edge negatives.

    The walk collects distinct visited nodes until subgraph_size is reached or
    the step budget runs out (smaller connected components yield what they
    have). Induced edges are the branch's hidden edge set.
    """
    plan = AugmentPlan(swap_targets=None, swap_donors=None)
    for r, rel in enumerate(g.relations):
        for k in range(mask_cfg.repeats):
            gen = rng.child(f"rwr/r={r}/k={k}").generator()
            nodes = _rwr_walk(gen, rel, cfg.subgraph_size, cfg.restart_prob,
                              cfg.step_budget)
            edges = _induced_edges(rel, nodes)
            negs, fb = _edge_negatives(
                gen, rel, edges[:, 0], edges[:, 1], mask_cfg.n_neg)
            plan.subgraphs[(r, k)] = RwrSubgraph(nodes, edges, negs, fb)
    return plan


def check_connected(rel, nodes):
    """True if the induced subgraph on nodes is connected (BFS)."""
    nodes = np.asarray(nodes)
    if nodes.size <= 1:
        return True
    inside = set(int(v) for v in nodes)
    frontier = [int(nodes[0])]
    seen = {int(nodes[0])}
    while frontier:
        u = frontier.pop()
        for v in rel.neighbors(u):
            v = int(v)
            if v in inside and v not in seen:
                seen.add(v)
                frontier.append(v)
    return len(seen) == len(inside)


def dump_plans(path, attr_plan=None, edge_plan=None, aug_plan=None):
    """Human-readable plan dump for debugging (--dump-plans)."""
    with open(path, "w") as fh:
        if attr_plan is not None and attr_plan.node_sets is not None:
            for k, nodes in enumerate(attr_plan.node_sets):
                fh.write(f"attr_mask k={k} nodes={','.join(map(str, nodes))}\n")
        if edge_plan is not None:
            for (r, k), em in sorted(edge_plan.edges.items()):
                for (v, u), negs, fb in zip(em.edges, em.negatives, em.fallback):
                    tag = " fallback" if fb else ""
                    fh.write(f"edge_mask r={r} k={k} edge={v}-{u} "
                             f"negs={','.join(map(str, negs))}{tag}\n")
        if aug_plan is not None:
            if aug_plan.swap_targets is not None:
                for k, (ts, ds) in enumerate(
                        zip(aug_plan.swap_targets, aug_plan.swap_donors)):
                    pairs = " ".join(f"{t}<-{d}" for t, d in zip(ts, ds))
                    fh.write(f"swap k={k} {pairs}\n")
            for (r, k), sg in sorted(aug_plan.subgraphs.items()):
                fh.write(f"rwr r={r} k={k} "
                         f"nodes={','.join(map(str, sg.nodes))} "
                         f"edges={';'.join(f'{u}-{v}' for u, v in sg.edges)}\n")


def validate_token_shape(x, token_value):
    if token_value.shape != (1, x.shape[1]):
        raise ShapeMismatch(
            f"mask token shape {token_value.shape} vs (1, {x.shape[1]})")


def apply_attribute_mask(x, masked_nodes, mask_token):
    """Differentiable token substitution: masked rows of x become the token.

    Gradient flows into the (trainable) token; x itself is constant data.
    """
    validate_token_shape(np.asarray(x), mask_token.value)
    return mask_rows(x, masked_nodes, mask_token)
