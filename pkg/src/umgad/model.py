"""Masked SGC autoencoders over relational views, and their losses.

Three views share one architecture and differ only in what is hidden from
the encoder:

  original  - attribute pipeline (mask token on sampled nodes) plus a
              structure pipeline (sampled edges removed, scored by decoder
              dot products against sampled negatives),
  attr_aug  - swapped-node rows replaced by the mask token, reconstruction
              target either the original rows (default) or the donor rows,
  sub_aug   - random-walk subgraphs hidden (their rows masked, their edges
              removed), trained with both the cosine and the edge losses.

Each (relation, repeat) branch owns its weights; per-relation outputs are
combined by softmax-weighted sums with learned logits. All encoders are
linear SGC stacks: propagation^hops applied to X @ W.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, EmptyList, ShapeMismatch

VIEWS = ("original", "attr_aug", "sub_aug")
PIPELINES = ("orig_attr", "orig_struct", "attr_aug", "sub_aug")
_PIPELINE_VIEW = {"orig_attr": "original", "orig_struct": "original",
                  "attr_aug": "attr_aug", "sub_aug": "sub_aug"}


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 32
    enc_layers: int = 1
    dec_layers: int = 1
    eta: float = 2.0
    cl_denominator: str = "paper"       # 'paper' | 'infonce'
    attr_aug_target: str = "original"   # 'original' | 'donor'

    def __post_init__(self):
        if self.hidden_dim < 1 or self.enc_layers < 1 or self.dec_layers < 1:
            raise ConfigError("hidden_dim / enc_layers / dec_layers must be >= 1")
        if self.eta < 1.0:
            raise ConfigError("eta must be >= 1")
        if self.cl_denominator not in ("paper", "infonce"):
            raise ConfigError(f"unknown cl_denominator '{self.cl_denominator}'")
        if self.attr_aug_target not in ("original", "donor"):
            raise ConfigError(f"unknown attr_aug_target '{self.attr_aug_target}'")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5    # attribute vs structure inside the original view
    beta: float = 0.4     # attribute vs structure inside the subgraph view
    lam: float = 0.3      # attribute-augmented view weight
    mu: float = 0.3       # subgraph-augmented view weight
    theta: float = 0.1    # contrastive weight
    epsilon: float = 0.5  # structure vs attribute residual in the score

    def __post_init__(self):
        for name in ("alpha", "beta", "epsilon"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} {v} outside [0, 1]")
        for name in ("lam", "mu", "theta"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be >= 0")


class AggregationWeights:
    """Learned per-relation logits for attribute and structure aggregation."""

    def __init__(self, view, n_relations):
        self.attr_logits = ad.Parameter(np.zeros(n_relations),
                                        f"agg/{view}/attr")
        self.struct_logits = ad.Parameter(np.zeros(n_relations),
                                          f"agg/{view}/struct")


class ModelParams:
    """Every trainable tensor, addressable by a stable name.

    enc[pipeline][r][k] / dec[pipeline][r][k] are per-layer weight lists;
    agg[view] holds the relation-mixing logits; mask_token is shared.
    """

    def __init__(self, feature_dim, n_relations, repeats, cfg, views, rng,
                 mean_row=None):
        if not views:
            raise ConfigError("at least one view must stay enabled")
        self.feature_dim = feature_dim
        self.n_relations = n_relations
        self.repeats = repeats
        self.cfg = cfg
        self.views = tuple(v for v in VIEWS if v in views)
        self.pipelines = tuple(p for p in PIPELINES
                               if _PIPELINE_VIEW[p] in self.views)

        def init_weight(name, fan_in, fan_out):
            # rng=None builds an empty shell (checkpoint loading fills it).
            # Near-identity + scaled Xavier noise: the net starts out as a
            # propagation-smoothing autoencoder, which the few full-batch
            # steps of a typical run can actually refine to convergence.
            if rng is None:
                return np.zeros((fan_in, fan_out))
            gen = rng.child(f"init/{name}").generator()
            a = np.sqrt(6.0 / (fan_in + fan_out))
            w = 0.1 * gen.uniform(-a, a, size=(fan_in, fan_out))
            d = min(fan_in, fan_out)
            w[np.arange(d), np.arange(d)] += 1.0
            return w

        def layer_dims(n_layers, d_in, d_out):
            # first layer maps d_in -> d_out, extras are d_out -> d_out
            dims = [(d_in, d_out)]
            dims += [(d_out, d_out)] * (n_layers - 1)
            return dims

        f, d_h = feature_dim, cfg.hidden_dim
        self.enc = {}
        self.dec = {}
        for pipe in self.pipelines:
            self.enc[pipe] = []
            self.dec[pipe] = []
            for r in range(n_relations):
                enc_r, dec_r = [], []
                for k in range(repeats):
                    enc_ws = []
                    for li, (a, b) in enumerate(
                            layer_dims(cfg.enc_layers, f, d_h)):
                        name = f"enc/{pipe}/r={r}/k={k}/l={li}"
                        enc_ws.append(ad.Parameter(init_weight(name, a, b), name))
                    dec_ws = []
                    dims = layer_dims(cfg.dec_layers, d_h, d_h)
                    dims[-1] = (d_h, f)  # last decoder layer maps back to f
                    for li, (a, b) in enumerate(dims):
                        name = f"dec/{pipe}/r={r}/k={k}/l={li}"
                        dec_ws.append(ad.Parameter(init_weight(name, a, b), name))
                    enc_r.append(enc_ws)
                    dec_r.append(dec_ws)
                self.enc[pipe].append(enc_r)
                self.dec[pipe].append(dec_r)

        self.agg = {view: AggregationWeights(view, n_relations)
                    for view in self.views}

        token = (np.asarray(mean_row, dtype=np.float64).reshape(1, f)
                 if mean_row is not None else np.zeros((1, f)))
        self.mask_token = ad.Parameter(token, "mask_token")

    def parameters(self):
        out = [self.mask_token]
        for pipe in self.pipelines:
            for r in range(self.n_relations):
                for k in range(self.repeats):
                    out.extend(self.enc[pipe][r][k])
                    out.extend(self.dec[pipe][r][k])
        for view in self.views:
            out.append(self.agg[view].attr_logits)
            out.append(self.agg[view].struct_logits)
        return out


def encode_decode(x_in, a_hat, enc_ws, dec_ws, enc_hops, dec_hops):
    """Linear SGC autoencoder: a_hat^enc @ (X W_enc...), then a_hat^dec @ H W_dec."""
    z = x_in
    for w in enc_ws:
        z = ad.matmul(z, w)
    h = ad.propagate(a_hat, z, enc_hops)
    d = ad.propagate(a_hat, h, dec_hops)
    for w in dec_ws:
        d = ad.matmul(d, w)
    return d


def run_pipeline(params, pipe, inputs, a_hats, executor=None):
    """Per-branch reconstructions for one pipeline.

    inputs[(r, k)] is the (possibly masked / dropped-out) encoder input;
    a_hats[(r, k)] the propagation matrix for that branch. Branches are
    independent, so an executor may build them concurrently; outputs are
    keyed, which keeps downstream accumulation order fixed.
    """
    cfg = params.cfg
    keys = [(r, k) for r in range(params.n_relations)
            for k in range(params.repeats)]

    def build(key):
        r, k = key
        return encode_decode(
            inputs[key], a_hats[key],
            params.enc[pipe][r][k], params.dec[pipe][r][k],
            cfg.enc_layers, cfg.dec_layers)

    if executor is None:
        values = [build(key) for key in keys]
    else:
        values = list(executor.map(build, keys))
    return dict(zip(keys, values))


def aggregate_relations(per_relation, logits):
    """Softmax-weighted sum of per-relation outputs."""
    if not per_relation:
        raise EmptyList("no relation outputs to aggregate")
    weights = ad.softmax_vec(logits)
    return ad.weighted_sum(per_relation, weights)


def aggregate_per_k(per_rk, params, view):
    """List over k of the relation-aggregated reconstruction."""
    logits = params.agg[view].attr_logits
    return [
        aggregate_relations(
            [per_rk[(r, k)] for r in range(params.n_relations)], logits)
        for k in range(params.repeats)
    ]


def attr_recon_loss(per_k_outputs, x, node_sets, eta):
    """Sum over repeats of the masked-row scaled cosine error.

    Empty row sets contribute nothing (mask_ratio 0 stays well-defined).
    """
    if len(per_k_outputs) != len(node_sets):
        raise ShapeMismatch("one node set per repeat expected")
    total = None
    for out_k, rows in zip(per_k_outputs, node_sets):
        if np.asarray(rows).size == 0:
            continue
        term = ad.scaled_cosine_loss(out_k, x, rows, eta)
        total = term if total is None else total + term
    return total if total is not None else ad.constant(0.0)


def struct_recon_loss(per_rk_outputs, edge_parts, params, view):
    """Softmax-NLL of hidden-edge scores, relation-mixed by learned logits.

    edge_parts[(r, k)] supplies .edges (v, u) and .negatives (v, u'); scores
    are decoder-output dot products g(v, u) = x(v) . x(u).
    """
    per_r = []
    for r in range(params.n_relations):
        acc = None
        for k in range(params.repeats):
            part = edge_parts[(r, k)]
            if part.edges.shape[0] == 0:
                continue
            emb = per_rk_outputs[(r, k)]
            pos = ad.gather_dot(emb, emb, part.edges[:, 0], part.edges[:, 1])
            neg = ad.gather_dot(
                emb, emb, part.edges[:, 0], part.negatives)
            term = ad.softmax_nll(pos, neg, include_positive=True)
            acc = term if acc is None else acc + term
        per_r.append(acc if acc is not None else ad.constant(0.0))
    weights = ad.softmax_vec(params.agg[view].struct_logits)
    return ad.dot(weights, ad.stack_scalars(per_r))


def contrastive_loss(z_original, z_attr_aug, z_sub_aug, neg_idx,
                     denominator="paper"):
    """Cross-view InfoNCE-style loss on l2-normalized node embeddings.

    For each anchor i with one sampled negative j = neg_idx[i] != i, each
    available augmented view zA contributes
        -log( exp(z_o(i).zA(i)) / (exp(z_o(i).z_o(j)) + exp(z_o(i).zA(j))) )
    summed over nodes. denominator='infonce' adds the positive to the
    denominator; 'paper' keeps the verbatim two-term denominator.
    """
    if denominator not in ("paper", "infonce"):
        raise ConfigError(f"unknown denominator mode '{denominator}'")
    n = z_original.value.shape[0]
    neg_idx = np.asarray(neg_idx, dtype=np.intp)
    if neg_idx.shape != (n,):
        raise ShapeMismatch("need one negative index per node")
    if np.any(neg_idx == np.arange(n)):
        raise ShapeMismatch("negative index must differ from the anchor")
    anchors = np.arange(n)
    zo = ad.row_normalize(z_original)
    include_pos = denominator == "infonce"
    total = None
    for z_aug in (z_attr_aug, z_sub_aug):
        if z_aug is None:
            continue
        za = ad.row_normalize(z_aug)
        pos = ad.gather_dot(zo, za, anchors, anchors)
        neg_same = ad.gather_dot(zo, zo, anchors, neg_idx)
        neg_cross = ad.gather_dot(zo, za, anchors, neg_idx)
        negs = ad.stack_cols([neg_same, neg_cross])
        term = ad.softmax_nll(pos, negs, include_positive=include_pos)
        total = term if total is None else total + term
    if total is None:
        raise EmptyList("contrastive loss needs at least one augmented view")
    return total


def subgraph_struct_matrix(x_tilde):
    """sigmoid(X X^T): dense reconstructed adjacency from node reconstructions."""
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    gram = x_tilde @ x_tilde.T
    return 1.0 / (1.0 + np.exp(-gram))


def total_loss(loss_original, loss_attr_aug, loss_sub_aug, loss_contrast, w):
    """Weighted sum of the per-view losses; absent views pass None."""
    total = None

    def accum(term, weight):
        nonlocal total
        if term is None or weight == 0.0:
            return
        piece = term if weight == 1.0 else weight * term
        total = piece if total is None else total + piece

    accum(loss_original, 1.0)
    accum(loss_attr_aug, w.lam)
    accum(loss_sub_aug, w.mu)
    accum(loss_contrast, w.theta)
    if total is None:
        raise ConfigError("every loss term is disabled")
    return total
