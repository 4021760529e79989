"""Minimal reverse-mode autodiff on numpy arrays.

A Var records the op that produced it (parents + a vjp closure); backward()
walks the recording in reverse topological order and accumulates gradients
into Parameter leaves. The op set is exactly what linear SGC autoencoders
with cosine / softmax losses need, nothing more.

Also home to the AdamW optimizer, the central-difference gradient checker,
and RngStream (labeled, order-independent random streams).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import (
    DegenerateRow,
    GraphConsumed,
    NumericalError,
    ShapeMismatch,
)

NORM_FLOOR = 1e-12


def _finite(value, what="op output"):
    # sum-then-test: one reduction, no bool temporary; any nan/inf in the
    # array drags the sum non-finite (np.all(np.isfinite(...)) costs ~3x)
    if not math.isfinite(float(np.sum(value))):
        if np.all(np.isfinite(value)):
            raise NumericalError(f"magnitude overflow in {what}")
        raise NumericalError(f"non-finite values in {what}")
    return value


class Var:
    """Node in the recording: a float64 array plus how it was computed.

    grad is populated by backward(); intermediate grads die with the
    recording, Parameter grads persist until zero_grad().
    """

    __slots__ = ("value", "grad", "_parents", "_vjp", "_done")

    def __init__(self, value, parents=(), vjp=None):
        value = np.asarray(value, dtype=np.float64)
        self.value = _finite(value)
        self.grad = None
        self._parents = parents
        self._vjp = vjp
        self._done = False

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    # Scalar-friendly operators so loss assembly reads like arithmetic.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, Var):
            return add(self, mul(other, -1.0))
        return add(self, -float(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Var):
    """Trainable leaf with a stable name (used by optimizer and checkpoints)."""

    __slots__ = ("name",)

    def __init__(self, value, name):
        super().__init__(value)
        self.name = name


def constant(value):
    return Var(value)


def zero_grad(params):
    for p in params:
        p.grad = np.zeros_like(p.value)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into .grad of every Var reachable from loss.

    The recording is single-use: a second backward() on the same root raises
    GraphConsumed.
    """
    if loss.value.ndim != 0:
        raise ShapeMismatch("backward() expects a scalar loss")
    if loss._done:
        raise GraphConsumed("backward() already ran on this recording")
    loss._done = True

    # Iterative post-order DFS; recursion depth is unbounded in K and hops.
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss._accum(np.ones_like(loss.value))
    for node in reversed(topo):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)
        if not isinstance(node, Parameter) and node is not loss:
            node.grad = None  # free intermediate gradients eagerly


# --- ops -------------------------------------------------------------------


def add(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        raise ShapeMismatch("add needs at least one Var")
    if not isinstance(a, Var):
        a, b = b, a
    if isinstance(b, Var):
        if a.value.shape != b.value.shape:
            raise ShapeMismatch(f"add shapes {a.value.shape} vs {b.value.shape}")

        def vjp(g):
            a._accum(g)
            b._accum(g)

        return Var(a.value + b.value, (a, b), vjp)

    bval = float(b)

    def vjp(g):
        a._accum(g)

    return Var(a.value + bval, (a,), vjp)


def mul(a, b):
    """Elementwise product; either side may be a plain scalar/array constant."""
    if not isinstance(a, Var) and not isinstance(b, Var):
        raise ShapeMismatch("mul needs at least one Var")
    if not isinstance(a, Var):
        a, b = b, a
    if isinstance(b, Var):
        if a.value.shape != b.value.shape:
            raise ShapeMismatch(f"mul shapes {a.value.shape} vs {b.value.shape}")

        def vjp(g):
            a._accum(g * b.value)
            b._accum(g * a.value)

        return Var(a.value * b.value, (a, b), vjp)

    bval = np.asarray(b, dtype=np.float64)

    def vjp(g):
        a._accum(g * bval)

    return Var(a.value * bval, (a,), vjp)


def matmul(a, b):
    avar, bvar = isinstance(a, Var), isinstance(b, Var)
    if not (avar or bvar):
        raise ShapeMismatch("matmul needs at least one Var")
    av = a.value if avar else np.asarray(a, dtype=np.float64)
    bv = b.value if bvar else np.asarray(b, dtype=np.float64)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul shapes {av.shape} @ {bv.shape}")

    parents = tuple(x for x, isv in ((a, avar), (b, bvar)) if isv)

    def vjp(g):
        if avar:
            a._accum(g @ bv.T)
        if bvar:
            b._accum(av.T @ g)

    return Var(av @ bv, parents, vjp)


def _transposed(a_hat):
    """CSR transpose of a propagation matrix, cached on the object.

    Backward passes hit the same handful of matrices over and over; the
    csc->csr conversion dwarfs the actual matvec on small graphs.
    """
    if not sparse.issparse(a_hat):
        return a_hat.T
    cached = getattr(a_hat, "_csr_t", None)
    if cached is None:
        cached = a_hat.T.tocsr()
        a_hat._csr_t = cached
    return cached


def _as_operator(a_hat):
    """Densify tiny sparse matrices; scipy dispatch overhead dominates there."""
    if sparse.issparse(a_hat) and a_hat.shape[0] <= 64:
        cached = getattr(a_hat, "_dense", None)
        if cached is None:
            cached = a_hat.toarray()
            a_hat._dense = cached
        return cached
    return a_hat


def propagate(a_hat, h, hops):
    """hops applications of a (sparse) propagation matrix: a_hat^hops @ h."""
    if hops < 0:
        raise ShapeMismatch("hops must be >= 0")
    if not isinstance(h, Var):
        h = Var(h)
    if a_hat.shape[1] != h.value.shape[0]:
        raise ShapeMismatch(f"propagate shapes {a_hat.shape} @ {h.value.shape}")
    if hops == 0:
        return h
    a_hat = _as_operator(a_hat)
    out = h.value
    for _ in range(hops):
        out = a_hat @ out

    def vjp(g):
        a_hat_t = _transposed(a_hat)
        for _ in range(hops):
            g = a_hat_t @ g
        h._accum(g)

    return Var(out, (h,), vjp)


def mask_rows(x, rows, token):
    """Copy of constant matrix x with the given rows replaced by a 1 x f token.

    Gradient flows into the token only (x is the fixed input data).
    """
    x = np.asarray(x, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.intp)
    if token.value.shape != (1, x.shape[1]):
        raise ShapeMismatch(
            f"mask token shape {token.value.shape} vs (1, {x.shape[1]})")
    out = x.copy()
    out[rows] = token.value[0]

    def vjp(g):
        token._accum(g[rows].sum(axis=0, keepdims=True))

    return Var(out, (token,), vjp)


def mean_stack(items):
    """Mean of a list of same-shape Vars."""
    if not items:
        raise ShapeMismatch("mean_stack of empty list")
    shape = items[0].value.shape
    for it in items:
        if it.value.shape != shape:
            raise ShapeMismatch("mean_stack shape mismatch")
    k = float(len(items))
    out = items[0].value.copy()
    for it in items[1:]:
        out += it.value
    out /= k

    def vjp(g):
        share = g / k
        for it in items:
            it._accum(share)

    return Var(out, tuple(items), vjp)


def stack_cols(items):
    """Stack 1-D Vars of length n into an (n, m) Var, one per column."""
    if not items:
        raise ShapeMismatch("stack_cols of empty list")
    n = items[0].value.shape[0]
    for it in items:
        if it.value.shape != (n,):
            raise ShapeMismatch("stack_cols expects equal-length vectors")
    out = np.stack([it.value for it in items], axis=1)

    def vjp(g):
        for j, it in enumerate(items):
            it._accum(g[:, j])

    return Var(out, tuple(items), vjp)


def stack_scalars(items):
    if not items:
        raise ShapeMismatch("stack_scalars of empty list")
    out = np.array([float(it.value) for it in items])

    def vjp(g):
        for j, it in enumerate(items):
            it._accum(g[j])

    return Var(out, tuple(items), vjp)


def dot(a, b):
    if a.value.ndim != 1 or a.value.shape != b.value.shape:
        raise ShapeMismatch(f"dot shapes {a.value.shape} vs {b.value.shape}")

    def vjp(g):
        a._accum(g * b.value)
        b._accum(g * a.value)

    return Var(a.value @ b.value, (a, b), vjp)


def softmax_vec(logits):
    """Softmax of a 1-D logit vector (relation aggregation weights)."""
    z = logits.value
    if z.ndim != 1:
        raise ShapeMismatch("softmax_vec expects a vector")
    e = np.exp(z - z.max())
    w = e / e.sum()

    def vjp(g):
        logits._accum(w * (g - (g @ w)))

    return Var(w, (logits,), vjp)


def weighted_sum(mats, weights):
    """sum_r weights[r] * mats[r] for same-shape matrices."""
    if not mats:
        raise ShapeMismatch("weighted_sum of empty list")
    if weights.value.shape != (len(mats),):
        raise ShapeMismatch("weighted_sum needs one weight per matrix")
    shape = mats[0].value.shape
    out = np.zeros(shape)
    for w, m in zip(weights.value, mats):
        if m.value.shape != shape:
            raise ShapeMismatch("weighted_sum shape mismatch")
        out += w * m.value

    def vjp(g):
        gw = np.array([float(np.sum(g * m.value)) for m in mats])
        weights._accum(gw)
        for w, m in zip(weights.value, mats):
            m._accum(w * g)

    return Var(out, (weights, *mats), vjp)


def row_normalize(x):
    """l2-normalize each row; raises DegenerateRow on a ~zero row."""
    v = x.value
    if v.ndim != 2:
        raise ShapeMismatch("row_normalize expects a matrix")
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms < NORM_FLOOR):
        raise DegenerateRow("cannot l2-normalize a zero row")
    y = v / norms

    def vjp(g):
        proj = np.sum(g * y, axis=1, keepdims=True)
        x._accum((g - y * proj) / norms)

    return Var(y, (x,), vjp)


def gather_dot(emb_a, emb_b, idx_a, idx_b):
    """Row dot products emb_a[idx_a] . emb_b[idx_b].

    idx_a is (E,); idx_b is (E,) or (E, N) (idx_a broadcasts along N).
    emb_a and emb_b may be the same Var.
    """
    idx_a = np.asarray(idx_a, dtype=np.intp)
    idx_b = np.asarray(idx_b, dtype=np.intp)
    av, bv = emb_a.value, emb_b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ShapeMismatch("gather_dot expects matrices with equal width")
    if idx_b.ndim == 1:
        out = np.einsum("ef,ef->e", av[idx_a], bv[idx_b])
    elif idx_b.ndim == 2:
        out = np.einsum("ef,enf->en", av[idx_a], bv[idx_b])
    else:
        raise ShapeMismatch("gather_dot idx_b must be 1-D or 2-D")

    parents = (emb_a,) if emb_a is emb_b else (emb_a, emb_b)

    def vjp(g):
        ga = np.zeros_like(av)
        gb = np.zeros_like(bv)
        if idx_b.ndim == 1:
            np.add.at(ga, idx_a, g[:, None] * bv[idx_b])
            np.add.at(gb, idx_b, g[:, None] * av[idx_a])
        else:
            np.add.at(ga, idx_a, np.einsum("en,enf->ef", g, bv[idx_b]))
            np.add.at(gb, idx_b, g[..., None] * av[idx_a][:, None, :])
        if emb_a is emb_b:
            emb_a._accum(ga + gb)
        else:
            emb_a._accum(ga)
            emb_b._accum(gb)

    return Var(out, parents, vjp)


def scaled_cosine_loss(x_hat, x, rows, eta):
    """mean_{i in rows} (1 - cos(x_hat[i], x[i]))**eta, scalar output in [0, 2**eta].

    x is the constant target matrix; gradient flows into x_hat only.
    """
    if eta < 1.0:
        raise ShapeMismatch("eta must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.intp)
    if rows.size == 0:
        raise ShapeMismatch("scaled_cosine_loss over an empty row set")
    if x_hat.value.shape != x.shape:
        raise ShapeMismatch(
            f"scaled_cosine_loss shapes {x_hat.value.shape} vs {x.shape}")
    a = x_hat.value[rows]
    b = x[rows]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na < NORM_FLOOR) or np.any(nb < NORM_FLOOR):
        raise DegenerateRow("zero row in cosine loss")
    cos = np.einsum("if,if->i", a, b) / (na * nb)
    cos = np.clip(cos, -1.0, 1.0)
    one_minus = 1.0 - cos
    out = np.mean(one_minus ** eta)

    def vjp(g):
        # d mean/d cos_i = -(eta/m) (1-cos_i)^(eta-1); d cos/d a as usual.
        m = rows.size
        dcos = -(eta / m) * one_minus ** (eta - 1.0)
        ga_rows = dcos[:, None] * (
            b / (na * nb)[:, None] - a * (cos / na**2)[:, None]
        )
        full = np.zeros_like(x_hat.value)
        np.add.at(full, rows, float(g) * ga_rows)
        x_hat._accum(full)

    return Var(out, (x_hat,), vjp)


def softmax_nll(pos, negs, include_positive=True):
    """Summed negative log-softmax of positive scores against negatives.

    pos is (E,), negs is (E, N). With include_positive the denominator is
    exp(pos) + sum exp(negs) (edge reconstruction); without it the denominator
    is sum exp(negs) alone (verbatim contrastive form). Stable for any score
    magnitude via max subtraction.
    """
    pv, nv = pos.value, negs.value
    if pv.ndim != 1 or nv.ndim != 2 or nv.shape[0] != pv.shape[0]:
        raise ShapeMismatch(f"softmax_nll shapes {pv.shape} vs {nv.shape}")
    if pv.shape[0] == 0:
        return Var(0.0)
    if nv.shape[1] == 0 and not include_positive:
        raise ShapeMismatch("empty denominator in softmax_nll")
    if include_positive:
        m = np.maximum(pv, nv.max(axis=1, initial=-np.inf))
        denom = np.exp(pv - m) + np.exp(nv - m[:, None]).sum(axis=1)
    else:
        m = nv.max(axis=1)
        denom = np.exp(nv - m[:, None]).sum(axis=1)
    # loss_e = log denom + m - pos_e; summed over rows
    out = np.sum(np.log(denom) + m - pv)

    def vjp(g):
        g = float(g)
        soft_neg = np.exp(nv - m[:, None]) / denom[:, None]
        if include_positive:
            gp = np.exp(pv - m) / denom - 1.0
        else:
            gp = -np.ones_like(pv)
        pos._accum(g * gp)
        negs._accum(g * soft_neg)

    return Var(out, (pos, negs), vjp)


# --- optimizer ---------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay.

    update: p *= (1 - lr*wd); m,v <- EMA(grad, grad^2); p -= lr * mhat/(sqrt(vhat)+eps)
    Moments are keyed by parameter name so they survive checkpointing.
    """

    def __init__(self, params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999),
                 eps=1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ShapeMismatch("duplicate parameter names")
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self):
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if self.weight_decay:
                p.value = p.value * (1.0 - self.lr * self.weight_decay)
            m = self.m[p.name] = b1 * self.m[p.name] + (1.0 - b1) * g
            v = self.v[p.name] = b2 * self.v[p.name] + (1.0 - b2) * g * g
            p.value = p.value - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            _finite(p.value, f"parameter {p.name} after AdamW step")

    def state_dict(self):
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for p in self.params:
            self.m[p.name] = np.array(state["m"][p.name], dtype=np.float64)
            self.v[p.name] = np.array(state["v"][p.name], dtype=np.float64)


# --- gradient checking -------------------------------------------------------


def finite_diff_check(loss_fn, params, epsilon=1e-5):
    """Max relative error between tape gradients and central differences.

    loss_fn must be a deterministic closure rebuilding the loss from the
    current parameter values. Relative error per coordinate uses
    |fd - ad| / max(|fd|, |ad|, 1e-6) so dead coordinates do not divide by 0.
    """
    params = list(params)
    zero_grad(params)
    backward(loss_fn())
    recorded = {p.name: np.array(p.grad) for p in params}

    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        grad = recorded[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(loss_fn().value)
            flat[i] = orig - epsilon
            f_minus = float(loss_fn().value)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            ad = grad[i]
            err = abs(fd - ad) / max(abs(fd), abs(ad), 1e-6)
            if err > worst:
                worst = err
    zero_grad(params)
    return worst


# --- random streams ----------------------------------------------------------


@dataclass(frozen=True)
class RngStream:
    """Deterministic, label-addressed random streams.

    Identical (seed, label) pairs always yield identical generators; distinct
    labels are statistically independent and insensitive to creation order,
    so dropping one consumer never shifts another's draws.
    """

    seed: int
    label: str = ""

    def child(self, suffix):
        label = f"{self.label}/{suffix}" if self.label else str(suffix)
        return RngStream(self.seed, label)

    def generator(self):
        digest = hashlib.sha256(self.label.encode("utf-8")).digest()
        words = [int.from_bytes(digest[i:i + 8], "little") for i in range(0, 32, 8)]
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *words]
        return np.random.default_rng(np.random.SeedSequence(entropy))
