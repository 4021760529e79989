"""Scoring, threshold selection, metrics, and benchmark anomaly injection.

A node's anomaly score per view combines a structure residual (L1 distance
between each adjacency row and the sigmoid-Gram matrix of the view's
reconstruction, averaged over relations) with an attribute residual (L2
distance between reconstruction and input), mixed by epsilon. The fused
score is the mean over views. Flagging uses a knee point on the ranked
fused-score curve unless a fixed top-k is requested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import autodiff as ad
from . import model as md
from .errors import (
    ConfigError,
    ConflictingSelectors,
    LengthMismatch,
    InsufficientNodes,
    ShapeMismatch,
    SingleClass,
    UntrainedParams,
)
from .graph import MultiplexGraph, RelationalSubgraph, build_adjacency
from .masking import MaskConfig, RwrConfig, round_half_up
from .train import _AdjCache, make_plans

VIEW_COLUMNS = {"original": "score_original",
                "attr_aug": "score_attr_aug",
                "sub_aug": "score_sub_aug"}


@dataclass
class AnomalyScores:
    per_view: dict          # view name -> (n,) array
    fused: np.ndarray       # (n,)

    @property
    def views(self):
        return tuple(self.per_view)


def _check_trained(params):
    enc_norm = max(
        float(np.abs(w.value).max())
        for pipe in params.pipelines
        for r in range(params.n_relations)
        for k in range(params.repeats)
        for w in params.enc[pipe][r][k])
    if enc_norm == 0.0:
        raise UntrainedParams("all encoder weights are zero")


def _view_reconstruction(g, params, view, plans, cache, no_mask):
    """Mean over K fresh plans of the aggregated reconstruction, as an array."""
    x = g.attributes
    R, K = params.n_relations, params.repeats
    pipe = {"original": "orig_attr", "attr_aug": "attr_aug",
            "sub_aug": "sub_aug"}[view]
    inputs = {}
    a_hats = {}
    if view in ("original", "attr_aug"):
        sets = (plans["attr"].node_sets if view == "original"
                else plans["swap"].swap_targets)
        for k in range(K):
            x_in = x if no_mask else ad.mask_rows(x, sets[k],
                                                  params.mask_token)
            for r in range(R):
                inputs[(r, k)] = x_in
                a_hats[(r, k)] = cache.full[r]
    else:
        for r in range(R):
            for k in range(K):
                sg = plans["rwr"].subgraphs[(r, k)]
                inputs[(r, k)] = (x if no_mask else
                                  ad.mask_rows(x, sg.nodes, params.mask_token))
                a_hats[(r, k)] = (cache.full[r] if no_mask
                                  else cache.without(r, sg.edges))
    per_rk = md.run_pipeline(params, pipe, inputs, a_hats)
    per_k = md.aggregate_per_k(per_rk, params, view)
    return ad.mean_stack(per_k).value


def _structure_residual(g, x_tilde, chunk=2048):
    """Per node: mean over relations of || sigmoid-Gram row - adjacency row ||_1."""
    n = g.node_count
    out = np.zeros(n)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        gram = x_tilde[start:stop] @ x_tilde.T
        recon = 1.0 / (1.0 + np.exp(-gram))
        acc = np.zeros(stop - start)
        for rel in g.relations:
            rows = np.asarray(
                np.abs(recon - rel.adjacency[start:stop].toarray()).sum(axis=1))
            acc += rows
        out[start:stop] = acc / g.n_relations
    return out


def score_nodes(g, params, weights, rng, mask_cfg=None, rwr_cfg=None,
                no_mask=False):
    """Fresh-plan anomaly scores per view plus their fused mean."""
    mask_cfg = mask_cfg if mask_cfg is not None else MaskConfig(
        repeats=params.repeats)
    if mask_cfg.repeats != params.repeats:
        raise ConfigError("mask repeats must match the trained model")
    rwr_cfg = rwr_cfg if rwr_cfg is not None else RwrConfig()
    _check_trained(params)
    cache = _AdjCache(g)
    plans = make_plans(g, mask_cfg, rwr_cfg, rng, params.views,
                       no_mask=no_mask)
    x = g.attributes
    per_view = {}
    for view in params.views:
        x_tilde = _view_reconstruction(g, params, view, plans, cache, no_mask)
        struct = _structure_residual(g, x_tilde)
        attr = np.linalg.norm(x_tilde - x, axis=1)
        per_view[view] = weights.epsilon * struct + (1.0 - weights.epsilon) * attr
    fused = np.mean(np.stack(list(per_view.values())), axis=0)
    return AnomalyScores(per_view, fused)


# --- threshold selection ------------------------------------------------------


@dataclass
class ScoreCurve:
    order: np.ndarray     # node ids, score-descending (ties by id)
    scores: np.ndarray    # sorted scores, descending
    smoothed: np.ndarray  # centered moving average of the normalized curve
    window: int


@dataclass
class ThresholdResult:
    knee_index: int       # 1-based rank boundary == nominal flagged count
    threshold: float
    flagged_count: int
    method: str


def _moving_average(y, window):
    """Centered moving average with shrinking windows at the edges."""
    half = window // 2
    padded = np.concatenate([np.zeros(1), np.cumsum(y)])
    n = y.size
    lo = np.maximum(np.arange(n) - half, 0)
    hi = np.minimum(np.arange(n) + half + 1, n)
    return (padded[hi] - padded[lo]) / (hi - lo)


def _bend(y):
    """|second difference| at interior points; entry j is position j+1."""
    return np.abs(y[2:] - 2.0 * y[1:-1] + y[:-2])


def rank_curve(scores):
    """Descending score curve with its smoothed copy (ties broken by node id)."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    y = scores[order]
    n = y.size
    window = max(5, round_half_up(n / 200.0))
    if window % 2 == 0:
        window += 1
    return ScoreCurve(order, y, _moving_average(y, window), window)


_FLAT_BEND = 1e-12


def select_threshold(scores):
    """Knee-point threshold on the ranked fused-score curve.

    The curve is sorted descending and min-max normalized on both axes.
    The bend statistic is the second-difference magnitude of the normalized
    curve; the slope-corrected curvature denominator is deliberately omitted
    because on a ranked curve it lets flat-tail noise outweigh real cliffs.
    The smoothed copy (centered moving average, window max(5, n/200) odd)
    locates the bend region; the raw curve pinpoints the knee inside a
    window-wide neighbourhood, first occurrence on ties. A curve with no
    measurable bend anywhere keeps the first interior position. knee_index
    is the 1-based boundary rank; the threshold is the knee_index-th ranked
    raw score, and every node scoring >= threshold is flagged (ties at the
    threshold included). Flat curves return method='degenerate' and flag
    nothing.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if n < 10:
        raise InsufficientNodes(f"need >= 10 nodes to place a knee, got {n}")
    curve = rank_curve(scores)
    y = curve.scores
    if y[0] == y[-1]:
        return ThresholdResult(0, float(y[0]), 0, "degenerate")
    span = y[0] - y[-1]
    y01 = (y - y[-1]) / span
    s01 = (curve.smoothed - y[-1]) / span

    bend_raw = _bend(y01)
    if bend_raw.max() <= _FLAT_BEND:
        knee = 1                                        # perfect line
    else:
        bend_smooth = _bend(s01)
        region = int(np.argmax(bend_smooth)) + 1        # position in 0..n-1
        lo = max(1, region - curve.window)
        hi = min(n - 2, region + curve.window)
        windowed = bend_raw[lo - 1:hi]
        if windowed.max() <= _FLAT_BEND:
            knee = lo
        else:
            knee = lo + int(np.argmax(windowed))        # first max in window
    threshold = float(y[knee - 1])                      # knee-th ranked score
    flagged = int(np.sum(scores >= threshold))
    return ThresholdResult(knee, threshold, flagged, "curvature")


def classify(scores, threshold_result=None, top_k=None):
    """0/1 flags from either a knee threshold or a fixed top-k (exactly one)."""
    scores = np.asarray(scores, dtype=np.float64)
    if (threshold_result is None) == (top_k is None):
        raise ConflictingSelectors(
            "provide exactly one of threshold_result / top_k")
    flags = np.zeros(scores.size, dtype=np.int64)
    if top_k is not None:
        if not 0 <= top_k <= scores.size:
            raise ConfigError(f"top_k {top_k} outside [0, {scores.size}]")
        order = np.argsort(-scores, kind="stable")
        flags[order[:top_k]] = 1
        return flags
    if threshold_result.method == "degenerate":
        return flags
    flags[scores >= threshold_result.threshold] = 1
    return flags


# --- metrics ------------------------------------------------------------------


def auc(scores, labels):
    """Area under the ROC curve via the rank statistic (ties get half credit)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise LengthMismatch("scores and labels must be equal-length vectors")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both classes present")
    ranks = stats.rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def macro_f1(pred, labels):
    """Unweighted mean of the two per-class F1 scores.

    A class absent from both pred and labels counts as F1 = 1.
    """
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape or pred.ndim != 1:
        raise LengthMismatch("pred and labels must be equal-length vectors")
    f1s = []
    for cls in (0, 1):
        p = pred == cls
        t = labels == cls
        tp = int(np.sum(p & t))
        if not p.any() and not t.any():
            f1s.append(1.0)
            continue
        denom = int(p.sum()) + int(t.sum())
        f1s.append(2.0 * tp / denom if denom else 1.0)
    return float(np.mean(f1s))


# --- anomaly injection --------------------------------------------------------


def inject_anomalies(g, n_struct, clique_size, n_attr, rng,
                     candidate_pool=50):
    """Planted benchmark anomalies; returns (new graph, 0/1 labels).

    n_struct groups of clique_size previously-untouched nodes are fully
    interconnected inside one uniformly chosen relation each. n_attr further
    nodes each take the attribute row of the most-distant (Euclidean) of
    candidate_pool sampled non-victim nodes. Victim sets are disjoint.
    """
    needed = n_struct * clique_size + n_attr
    if needed > g.node_count:
        raise InsufficientNodes(
            f"{needed} victims requested, only {g.node_count} nodes")
    if n_struct < 0 or n_attr < 0 or clique_size < 2 and n_struct > 0:
        raise ConfigError("bad injection sizes")
    gen = rng.generator() if isinstance(rng, ad.RngStream) else rng

    labels = np.zeros(g.node_count, dtype=np.int64)
    pool = np.arange(g.node_count)

    victims = gen.choice(pool, size=needed, replace=False)
    struct_victims = victims[:n_struct * clique_size]
    attr_victims = victims[n_struct * clique_size:]
    labels[victims] = 1

    new_edges = {r: [] for r in range(g.n_relations)}
    for i in range(n_struct):
        group = struct_victims[i * clique_size:(i + 1) * clique_size]
        rel_id = int(gen.integers(0, g.n_relations))
        for a in range(clique_size):
            for b in range(a + 1, clique_size):
                new_edges[rel_id].append((int(group[a]), int(group[b])))

    relations = []
    for r, rel in enumerate(g.relations):
        if new_edges[r]:
            combined = np.vstack([rel.edge_array(),
                                  np.array(new_edges[r], dtype=np.int64)])
            adj, e = build_adjacency(combined, g.node_count, name=rel.name)
            relations.append(RelationalSubgraph(r, rel.name, adj, e))
        else:
            relations.append(
                RelationalSubgraph(r, rel.name, rel.adjacency.copy(),
                                   rel.edge_count))

    attributes = g.attributes.copy()
    non_victims = np.setdiff1d(pool, victims)
    for v in attr_victims:
        pool_size = min(candidate_pool, non_victims.size)
        cands = gen.choice(non_victims, size=pool_size, replace=False)
        dists = np.linalg.norm(g.attributes[cands] - g.attributes[v], axis=1)
        attributes[v] = g.attributes[cands[np.argmax(dists)]]

    return MultiplexGraph(relations, attributes, labels), labels


# --- file I/O -----------------------------------------------------------------

SCORE_HEADER = "node_id,score_original,score_attr_aug,score_sub_aug,score_fused,flag"
CURVE_HEADER = "rank,score,smoothed"


def write_scores_csv(path, scores, flags):
    """Fixed-schema per-node score table; absent views are written as nan."""
    n = scores.fused.size
    if flags.shape != (n,):
        raise LengthMismatch("flags length != node count")
    with open(path, "w") as fh:
        fh.write(SCORE_HEADER + "\n")
        for i in range(n):
            cells = [str(i)]
            for view in ("original", "attr_aug", "sub_aug"):
                value = scores.per_view.get(view)
                cells.append(repr(float(value[i])) if value is not None
                             else "nan")
            cells.append(repr(float(scores.fused[i])))
            cells.append(str(int(flags[i])))
            fh.write(",".join(cells) + "\n")


def read_scores_csv(path):
    """Returns (node_ids, fused scores, flags) from a scores file."""
    from .errors import MissingFile, ParseError
    from pathlib import Path
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    with open(path) as fh:
        header = fh.readline().strip()
        if header != SCORE_HEADER:
            raise ParseError(path, 1, f"expected header '{SCORE_HEADER}'")
        ids, fused, flags = [], [], []
        for ln, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != 6:
                raise ParseError(path, ln, "expected 6 columns")
            try:
                ids.append(int(parts[0]))
                fused.append(float(parts[4]))
                flags.append(int(parts[5]))
            except ValueError:
                raise ParseError(path, ln, "bad numeric value") from None
    return (np.array(ids), np.array(fused), np.array(flags, dtype=np.int64))


def write_curve_csv(path, curve):
    with open(path, "w") as fh:
        fh.write(CURVE_HEADER + "\n")
        for i in range(curve.scores.size):
            fh.write(f"{i + 1},{repr(float(curve.scores[i]))},"
                     f"{repr(float(curve.smoothed[i]))}\n")
