"""Training loop: plan, reconstruct, descend.

Each epoch draws fresh plans (labeled RNG streams keep branches independent),
builds every enabled pipeline's reconstruction graph, assembles the weighted
loss, and takes one AdamW step. Ablation flags remove whole terms without
disturbing the random draws of the remaining ones.

Checkpoint container (umgad-ckpt v1): an .npz holding
    format_version          scalar int
    meta                    JSON string (dims, configs, views, flags)
    param/<name>            every trainable tensor
    adam/t, adam/m|v/<name> optimizer moments (when saved with the optimizer)
Round-trips are bit-exact (float64 arrays stored raw).
"""

from __future__ import annotations

import json
import os
import time
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import sparse

from . import autodiff as ad
from . import model as md
from .errors import (
    ConfigError,
    IndexOutOfRange,
    IoError,
    NumericalError,
    VersionMismatch,
)
from .graph import require_edges
from .masking import (
    MaskConfig,
    RwrConfig,
    dump_plans,
    plan_attribute_masks,
    plan_attribute_augmentation,
    plan_edge_masks,
    sample_rwr_subgraphs,
)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.01
    dropout: float = 0.1
    seed: int = 0
    replan_every: int = 1
    threads: int = 1
    no_mask: bool = False
    no_original: bool = False
    no_attr_aug: bool = False
    no_sub_aug: bool = False
    no_dcl: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.replan_every < 1:
            raise ConfigError("replan_every must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.no_original and self.no_attr_aug and self.no_sub_aug:
            raise ConfigError("all views disabled; nothing to train")

    def views(self):
        views = []
        if not self.no_original:
            views.append("original")
        if not self.no_attr_aug:
            views.append("attr_aug")
        if not self.no_sub_aug:
            views.append("sub_aug")
        return tuple(views)


LOG_COLUMNS = ("epoch", "seconds", "total", "orig_attr", "orig_struct",
               "original", "attr_aug", "sub_attr", "sub_struct", "sub_aug",
               "contrast")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, **kwargs):
        self.rows.append({c: kwargs.get(c, 0.0) for c in LOG_COLUMNS})

    def column(self, name):
        return np.array([row[name] for row in self.rows])

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(LOG_COLUMNS) + "\n")
            for row in self.rows:
                cells = [str(row["epoch"])]
                cells += [repr(float(row[c])) for c in LOG_COLUMNS[1:]]
                fh.write(",".join(cells) + "\n")


# --- plan / input assembly ---------------------------------------------------


def make_plans(g, mask_cfg, rwr_cfg, rng, views, no_mask=False):
    """Draw one round of plans for the enabled views.

    Streams are labeled per planner, so disabling a view never shifts the
    draws of another. no_mask still draws plans (the structure losses score
    the planned edge subsets) but callers will not apply them to inputs.
    """
    plans = {}
    if "original" in views:
        plans["attr"] = plan_attribute_masks(g, mask_cfg, rng)
        plans["edge"] = plan_edge_masks(g, mask_cfg, rng)
    if "attr_aug" in views:
        plans["swap"] = plan_attribute_augmentation(g, mask_cfg, rng)
    if "sub_aug" in views:
        plans["rwr"] = sample_rwr_subgraphs(g, rwr_cfg, mask_cfg, rng)
    return plans


class _AdjCache:
    """Normalized propagation matrices, full and with hidden edges removed.

    The A + I sparsity pattern per relation is fixed; removing edges only
    zeroes their two data slots and rescales by the fresh degrees, so no CSR
    rebuild or index sort happens per branch. Self-loops are never removed,
    keeping every degree >= 1.
    """

    def __init__(self, g):
        self.node_count = n = g.node_count
        self._tilde, self._rows, self._keys, self.full = [], [], [], []
        self._memo = {}
        for rel in g.relations:
            t = (rel.adjacency + sparse.identity(n, format="csr")).tocsr()
            t.sort_indices()
            rows = np.repeat(np.arange(n), np.diff(t.indptr))
            self._tilde.append(t)
            self._rows.append(rows)
            self._keys.append(rows * n + t.indices)  # strictly increasing
            self.full.append(self._normalized(len(self._tilde) - 1, t.data))

    def _normalized(self, r, data):
        t = self._tilde[r]
        deg = np.bincount(self._rows[r], weights=data, minlength=self.node_count)
        s = 1.0 / np.sqrt(deg)
        vals = data * s[self._rows[r]] * s[t.indices]
        return sparse.csr_matrix((vals, t.indices, t.indptr), shape=t.shape)

    def without(self, r, removed):
        if removed.shape[0] == 0:
            return self.full[r]
        key = (r, removed.tobytes())
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        n = self.node_count
        rkeys = np.concatenate([removed[:, 0] * n + removed[:, 1],
                                removed[:, 1] * n + removed[:, 0]])
        slots = np.searchsorted(self._keys[r], rkeys)
        if (slots >= self._keys[r].size).any() or \
                (self._keys[r][np.minimum(slots, self._keys[r].size - 1)]
                 != rkeys).any():
            raise IndexOutOfRange(
                f"relation {r}: a removed edge is not present in the graph")
        data = self._tilde[r].data.copy()
        data[slots] = 0.0
        out = self._normalized(r, data)
        if len(self._memo) >= 64:  # fresh plans each epoch; keep this bounded
            self._memo.clear()
        self._memo[key] = out
        return out


def _dropout(x, rate, gen):
    """Inverted dropout; differentiable when x is a Var, cheap when constant."""
    if rate <= 0.0 or gen is None:
        return x
    shape = x.value.shape if isinstance(x, ad.Var) else x.shape
    mask = (gen.random(shape) >= rate) / (1.0 - rate)
    if isinstance(x, ad.Var):
        return ad.mul(x, mask)
    return x * mask


def build_losses(g, params, plans, weights, *, no_mask=False, neg_idx=None,
                 dropout_rate=0.0, dropout_rng=None, adj_cache=None,
                 executor=None, cl_enabled=True):
    """Assemble every enabled loss term from explicit plans.

    Returns a dict of scalar Vars: total plus its components (absent terms
    are None). Exposed separately from train() so tests can drive it with
    hand-built plans.
    """
    x = g.attributes
    n, f = x.shape
    K = params.repeats
    R = params.n_relations
    cache = adj_cache if adj_cache is not None else _AdjCache(g)
    all_nodes = np.arange(n)
    eta = params.cfg.eta

    def drop(x_in, pipe, r, k):
        if dropout_rate <= 0.0 or dropout_rng is None:
            return x_in
        gen = dropout_rng.child(f"dropout/{pipe}/r={r}/k={k}").generator()
        return _dropout(x_in, dropout_rate, gen)

    losses = {key: None for key in ("orig_attr", "orig_struct", "original",
                                    "attr_aug", "sub_attr", "sub_struct",
                                    "sub_aug", "contrast")}
    z_parts = {}

    if "original" in params.views:
        attr_plan, edge_plan = plans["attr"], plans["edge"]
        # attribute pipeline: same masked rows for every relation at repeat k
        masked = {}
        for k in range(K):
            if no_mask:
                masked[k] = None  # plain input
            else:
                masked[k] = ad.mask_rows(x, attr_plan.node_sets[k],
                                         params.mask_token)
        inputs = {(r, k): drop(x if masked[k] is None else masked[k],
                               "orig_attr", r, k)
                  for r in range(R) for k in range(K)}
        a_hats = {(r, k): cache.full[r] for r in range(R) for k in range(K)}
        per_rk = md.run_pipeline(params, "orig_attr", inputs, a_hats,
                                 executor=executor)
        per_k = md.aggregate_per_k(per_rk, params, "original")
        sets = ([all_nodes] * K if no_mask else attr_plan.node_sets)
        losses["orig_attr"] = md.attr_recon_loss(per_k, x, sets, eta)
        z_parts["original"] = per_k

        # structure pipeline: hidden edges removed from propagation
        inputs = {(r, k): drop(x, "orig_struct", r, k)
                  for r in range(R) for k in range(K)}
        if no_mask:
            a_hats_s = {(r, k): cache.full[r]
                        for r in range(R) for k in range(K)}
        else:
            a_hats_s = {(r, k): cache.without(r, edge_plan.edges[(r, k)].edges)
                        for r in range(R) for k in range(K)}
        per_rk_s = md.run_pipeline(params, "orig_struct", inputs, a_hats_s,
                                   executor=executor)
        losses["orig_struct"] = md.struct_recon_loss(
            per_rk_s, edge_plan.edges, params, "original")
        losses["original"] = (weights.alpha * losses["orig_attr"]
                              + (1.0 - weights.alpha) * losses["orig_struct"])

    if "attr_aug" in params.views:
        aug = plans["swap"]
        masked = {}
        targets_k = []
        for k in range(K):
            if no_mask:
                masked[k] = None
                targets_k.append(x)
            else:
                masked[k] = ad.mask_rows(x, aug.swap_targets[k],
                                         params.mask_token)
                if params.cfg.attr_aug_target == "donor":
                    t = x.copy()
                    t[aug.swap_targets[k]] = x[aug.swap_donors[k]]
                    targets_k.append(t)
                else:
                    targets_k.append(x)
        inputs = {(r, k): drop(x if masked[k] is None else masked[k],
                               "attr_aug", r, k)
                  for r in range(R) for k in range(K)}
        a_hats = {(r, k): cache.full[r] for r in range(R) for k in range(K)}
        per_rk = md.run_pipeline(params, "attr_aug", inputs, a_hats,
                                 executor=executor)
        per_k = md.aggregate_per_k(per_rk, params, "attr_aug")
        sets = ([all_nodes] * K if no_mask else aug.swap_targets)
        total = None
        for out_k, rows, tgt in zip(per_k, sets, targets_k):
            if np.asarray(rows).size == 0:
                continue
            term = ad.scaled_cosine_loss(out_k, tgt, rows, eta)
            total = term if total is None else total + term
        losses["attr_aug"] = total if total is not None else ad.constant(0.0)
        z_parts["attr_aug"] = per_k

    if "sub_aug" in params.views:
        rwr = plans["rwr"]
        inputs = {}
        a_hats = {}
        union_sets = [set() for _ in range(K)]
        for r in range(R):
            for k in range(K):
                sg = rwr.subgraphs[(r, k)]
                if no_mask:
                    x_in = x
                    a_hats[(r, k)] = cache.full[r]
                else:
                    x_in = ad.mask_rows(x, sg.nodes, params.mask_token)
                    a_hats[(r, k)] = cache.without(r, sg.edges)
                    union_sets[k].update(int(v) for v in sg.nodes)
                inputs[(r, k)] = drop(x_in, "sub_aug", r, k)
        per_rk = md.run_pipeline(params, "sub_aug", inputs, a_hats,
                                 executor=executor)
        per_k = md.aggregate_per_k(per_rk, params, "sub_aug")
        if no_mask:
            sets = [all_nodes] * K
        else:
            sets = [np.array(sorted(s), dtype=np.int64) for s in union_sets]
        losses["sub_attr"] = md.attr_recon_loss(per_k, x, sets, eta)
        losses["sub_struct"] = md.struct_recon_loss(
            per_rk, rwr.subgraphs, params, "sub_aug")
        losses["sub_aug"] = (weights.beta * losses["sub_attr"]
                             + (1.0 - weights.beta) * losses["sub_struct"])
        z_parts["sub_aug"] = per_k

    if cl_enabled and "original" in params.views and (
            "attr_aug" in params.views or "sub_aug" in params.views):
        if neg_idx is None:
            raise ConfigError("contrastive loss needs negative indices")
        z = {view: ad.mean_stack(parts) for view, parts in z_parts.items()}
        losses["contrast"] = md.contrastive_loss(
            z["original"], z.get("attr_aug"), z.get("sub_aug"), neg_idx,
            denominator=params.cfg.cl_denominator)

    losses["total"] = md.total_loss(
        losses.get("original"), losses.get("attr_aug"),
        losses.get("sub_aug"), losses.get("contrast"), weights)
    return losses


def sample_cl_negatives(n, gen):
    """One uniform j != i per anchor."""
    j = gen.integers(0, n - 1, size=n)
    return (j + (j >= np.arange(n))).astype(np.int64)


def train(g, model_cfg, train_cfg, weights, mask_cfg=None, rwr_cfg=None,
          log=None, dump_plans_path=None):
    """Train a model on g; returns (ModelParams, TrainLog, AdamW)."""
    mask_cfg = mask_cfg if mask_cfg is not None else MaskConfig()
    rwr_cfg = rwr_cfg if rwr_cfg is not None else RwrConfig()
    require_edges(g)
    views = train_cfg.views()

    root = ad.RngStream(train_cfg.seed)
    params = md.ModelParams(
        g.feature_dim, g.n_relations, mask_cfg.repeats, model_cfg, views,
        root, mean_row=g.attributes.mean(axis=0))
    all_params = params.parameters()
    optimizer = ad.AdamW(all_params, lr=train_cfg.lr,
                         weight_decay=train_cfg.weight_decay)
    log = log if log is not None else TrainLog()
    cache = _AdjCache(g)
    cl_on = not train_cfg.no_dcl

    executor = (ThreadPoolExecutor(max_workers=train_cfg.threads)
                if train_cfg.threads > 1 else None)
    try:
        plans = None
        for epoch in range(train_cfg.epochs):
            t0 = time.perf_counter()
            if epoch % train_cfg.replan_every == 0:
                plan_rng = root.child(f"epoch={epoch}")
                plans = make_plans(g, mask_cfg, rwr_cfg, plan_rng, views,
                                   no_mask=train_cfg.no_mask)
                if dump_plans_path is not None and epoch == 0:
                    dump_plans(dump_plans_path,
                               attr_plan=plans.get("attr"),
                               edge_plan=plans.get("edge"),
                               aug_plan=_merge_aug(plans))
            neg_idx = None
            if cl_on and "original" in views and len(views) > 1:
                gen = root.child(f"epoch={epoch}/cl").generator()
                neg_idx = sample_cl_negatives(g.node_count, gen)
            try:
                losses = build_losses(
                    g, params, plans, weights, no_mask=train_cfg.no_mask,
                    neg_idx=neg_idx, dropout_rate=train_cfg.dropout,
                    dropout_rng=root.child(f"epoch={epoch}"),
                    adj_cache=cache, executor=executor, cl_enabled=cl_on)
                ad.zero_grad(all_params)
                ad.backward(losses["total"])
                optimizer.step()
            except NumericalError as err:
                raise NumericalError(f"epoch {epoch + 1}: {err}") from err
            log.add(epoch=epoch + 1,
                    seconds=time.perf_counter() - t0,
                    **{key: (term.item() if term is not None else 0.0)
                       for key, term in losses.items()
                       if key in LOG_COLUMNS})
    finally:
        if executor is not None:
            executor.shutdown()
    return params, log, optimizer


def _merge_aug(plans):
    swap = plans.get("swap")
    rwr = plans.get("rwr")
    if swap is None and rwr is None:
        return None
    from .masking import AugmentPlan
    merged = AugmentPlan(
        swap_targets=swap.swap_targets if swap else None,
        swap_donors=swap.swap_donors if swap else None)
    if rwr is not None:
        merged.subgraphs = rwr.subgraphs
    return merged


# --- checkpoints -------------------------------------------------------------


def checkpoint_meta(params, train_cfg=None, mask_cfg=None, rwr_cfg=None,
                    weights=None, extra=None):
    meta = {
        "feature_dim": params.feature_dim,
        "n_relations": params.n_relations,
        "repeats": params.repeats,
        "views": list(params.views),
        "model": asdict(params.cfg),
    }
    if train_cfg is not None:
        meta["train"] = asdict(train_cfg)
    if mask_cfg is not None:
        meta["mask"] = asdict(mask_cfg)
    if rwr_cfg is not None:
        meta["rwr"] = asdict(rwr_cfg)
    if weights is not None:
        meta["loss"] = asdict(weights)
    if extra:
        meta.update(extra)
    return meta


def save_checkpoint(params, path, optimizer=None, meta=None):
    """Write the versioned checkpoint container described in the module docstring."""
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION, dtype=np.int64),
        "meta": np.array(json.dumps(meta if meta is not None
                                    else checkpoint_meta(params))),
    }
    for p in params.parameters():
        arrays[f"param/{p.name}"] = p.value
    if optimizer is not None:
        state = optimizer.state_dict()
        arrays["adam/t"] = np.array(state["t"], dtype=np.int64)
        for name, m in state["m"].items():
            arrays[f"adam/m/{name}"] = m
        for name, v in state["v"].items():
            arrays[f"adam/v/{name}"] = v
    # np.savez appends .npz when missing; keep the caller's exact path
    path = str(path)
    np.savez(path, **arrays)
    if not path.endswith(".npz"):
        os.replace(path + ".npz", path)


def load_checkpoint(path):
    """Load a checkpoint; returns (ModelParams, meta dict, adam state | None)."""
    try:
        data = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise IoError(f"checkpoint not found: {path}") from None
    except (zipfile.BadZipFile, ValueError, OSError) as err:
        raise VersionMismatch(f"unreadable checkpoint {path}: {err}") from None
    with data:
        if "format_version" not in data or "meta" not in data:
            raise VersionMismatch(f"{path} is not an umgad checkpoint")
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise VersionMismatch(
                f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        meta = json.loads(str(data["meta"]))
        cfg = md.ModelConfig(**meta["model"])
        params = md.ModelParams(
            meta["feature_dim"], meta["n_relations"], meta["repeats"], cfg,
            tuple(meta["views"]), rng=None)
        for p in params.parameters():
            key = f"param/{p.name}"
            if key not in data:
                raise VersionMismatch(f"checkpoint missing tensor {p.name}")
            value = np.asarray(data[key], dtype=np.float64)
            if value.shape != p.value.shape:
                raise VersionMismatch(
                    f"tensor {p.name}: shape {value.shape} vs {p.value.shape}")
            p.value = value
        adam_state = None
        if "adam/t" in data:
            adam_state = {
                "t": int(data["adam/t"]),
                "m": {p.name: np.asarray(data[f"adam/m/{p.name}"])
                      for p in params.parameters()},
                "v": {p.name: np.asarray(data[f"adam/v/{p.name}"])
                      for p in params.parameters()},
            }
    return params, meta, adam_state
