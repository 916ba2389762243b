"""BEHRT-style encoder in numpy: parameters, forward passes, losses and gradients.

Every function here works in the floating dtype of the parameter arrays, so
the same code runs training in float32 and gradient checks in extended precision.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum
from typing import Mapping

import numpy as np

from .data import SequenceBatch

ModelParams = dict  # name -> ndarray, in canonical order
ParamGradients = dict

MASK_VALUE = -1e9
LN_EPS = 1e-5
INIT_STD = 0.02
# std of a standard normal cut at +-2; dividing by it restores unit variance
_TRUNC_STD = math.sqrt(1.0 - 4.0 * math.exp(-2.0) / math.sqrt(2.0 * math.pi) / math.erf(math.sqrt(2.0)))


class Head(str, Enum):
    MLM = "MLM"
    NEXT_VISIT = "NEXT_VISIT"


@dataclass(frozen=True)
class HyperParams:
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    max_len: int = 64
    vocab: int = 0
    groups: int = 0
    age_buckets: int = 121
    year_buckets: int = 60
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    mask_prob: float = 0.15
    dropout: float = 0.0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if not 0 <= self.mask_prob < 1:
            raise ValueError("mask_prob must lie in [0, 1)")
        if self.dropout != 0:
            raise ValueError("dropout is not supported; runs are kept deterministic")
        for name in ("hidden", "layers", "heads", "ffn_dim", "max_len", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def for_vocab(self, vocab) -> "HyperParams":
        return replace(self, vocab=vocab.size, groups=vocab.num_groups,
                       age_buckets=vocab.num_age_buckets, year_buckets=vocab.num_year_buckets)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter(s): {sorted(unknown)}")
        return cls(**d)


def param_shapes(hyper: HyperParams) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names and shapes; the order is the checkpoint order."""
    H, F = hyper.hidden, hyper.ffn_dim
    if hyper.vocab < 1 or hyper.groups < 1:
        raise ValueError("hyper.vocab and hyper.groups must be set (see HyperParams.for_vocab)")
    shapes = {
        "emb.tok": (hyper.vocab, H),
        "emb.age": (hyper.age_buckets, H),
        "emb.year": (hyper.year_buckets, H),
        "emb.seg": (2, H),
        "emb.pos": (hyper.max_len, H),
        "emb.ln_g": (H,),
        "emb.ln_b": (H,),
    }
    for i in range(hyper.layers):
        p = f"layer{i}."
        shapes.update({
            p + "ln1_g": (H,), p + "ln1_b": (H,),
            p + "wq": (H, H), p + "bq": (H,),
            p + "wk": (H, H), p + "bk": (H,),
            p + "wv": (H, H), p + "bv": (H,),
            p + "wo": (H, H), p + "bo": (H,),
            p + "ln2_g": (H,), p + "ln2_b": (H,),
            p + "w1": (H, F), p + "b1": (F,),
            p + "w2": (F, H), p + "b2": (H,),
        })
    shapes.update({
        "mlm.w": (H, hyper.vocab), "mlm.b": (hyper.vocab,),
        "nv.w": (H, hyper.groups), "nv.b": (hyper.groups,),
    })
    return shapes


def _kind(name: str) -> str:
    leaf = name.rsplit(".", 1)[1]
    if leaf.endswith("_g"):
        return "gain"
    if leaf.startswith("b") or leaf.endswith("_b"):
        return "bias"
    return "weight"


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * (std / _TRUNC_STD)


def init_params(hyper: HyperParams, seed: int, dtype=np.float32) -> ModelParams:
    """Weights from a normal cut at 2 sigma and rescaled to std 0.02, biases 0, layernorm gains 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(hyper).items():
        kind = _kind(name)
        if kind == "gain":
            params[name] = np.ones(shape, dtype=dtype)
        elif kind == "bias":
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = _truncated_normal(rng, shape, INIT_STD).astype(dtype)
    return params


def head_param_names(head: Head) -> tuple[str, str]:
    return ("mlm.w", "mlm.b") if Head(head) is Head.MLM else ("nv.w", "nv.b")


def check_params(params: ModelParams, hyper: HyperParams) -> None:
    shapes = param_shapes(hyper)
    if set(params) != set(shapes):
        missing, extra = set(shapes) - set(params), set(params) - set(shapes)
        raise ValueError(f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ValueError(f"tensor {name!r}: shape {params[name].shape} != expected {shape}")


def copy_params(params: ModelParams) -> ModelParams:
    return {k: v.copy() for k, v in params.items()}


# --- building blocks ---------------------------------------------------------

def _layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _layernorm_back(dy, cache):
    xhat, rstd, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_back(dy, x, t):
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _split_heads(x, nh):
    B, L, H = x.shape
    return x.reshape(B, L, nh, H // nh).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, nh, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, nh * dh)


def _check_batch(batch: SequenceBatch, hyper: HyperParams) -> None:
    B, L = batch.shape
    if L > hyper.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len={hyper.max_len}")
    for lane in ("age_ids", "year_ids", "segment_ids", "position_ids", "attention_mask"):
        if getattr(batch, lane).shape != (B, L):
            raise ValueError(f"lane {lane} has shape {getattr(batch, lane).shape}, expected {(B, L)}")
    limits = {"token_ids": hyper.vocab, "age_ids": hyper.age_buckets, "year_ids": hyper.year_buckets,
              "segment_ids": 2, "position_ids": hyper.max_len}
    for lane, hi in limits.items():
        arr = getattr(batch, lane)
        if arr.size and (arr.min() < 0 or arr.max() >= hi):
            raise ValueError(f"lane {lane} has ids outside [0, {hi})")


# --- encoder -----------------------------------------------------------------

def encode(params: ModelParams, batch: SequenceBatch, hyper: HyperParams, keep_cache: bool = False):
    """Final hidden states (B, L, H), plus the activation cache when asked."""
    _check_batch(batch, hyper)
    dtype = params["emb.tok"].dtype
    x = (params["emb.tok"][batch.token_ids] + params["emb.age"][batch.age_ids]
         + params["emb.year"][batch.year_ids] + params["emb.seg"][batch.segment_ids]
         + params["emb.pos"][batch.position_ids])
    h, ln0 = _layernorm(x, params["emb.ln_g"], params["emb.ln_b"])
    mask_add = np.where(batch.attention_mask == 0, MASK_VALUE, 0.0).astype(dtype)[:, None, None, :]
    nh = hyper.heads
    scale = dtype.type(1.0 / math.sqrt(hyper.head_dim))
    layers = []
    for i in range(hyper.layers):
        p = f"layer{i}."
        a_in, ln1 = _layernorm(h, params[p + "ln1_g"], params[p + "ln1_b"])
        q = _split_heads(a_in @ params[p + "wq"] + params[p + "bq"], nh)
        k = _split_heads(a_in @ params[p + "wk"] + params[p + "bk"], nh)
        v = _split_heads(a_in @ params[p + "wv"] + params[p + "bv"], nh)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale + mask_add
        s = s - s.max(-1, keepdims=True)
        e = np.exp(s)
        prob = e / e.sum(-1, keepdims=True)
        ctx = _merge_heads(prob @ v)
        h = h + ctx @ params[p + "wo"] + params[p + "bo"]
        f_in, ln2 = _layernorm(h, params[p + "ln2_g"], params[p + "ln2_b"])
        u = f_in @ params[p + "w1"] + params[p + "b1"]
        act, t = _gelu(u)
        h = h + act @ params[p + "w2"] + params[p + "b2"]
        if keep_cache:
            layers.append((a_in, ln1, q, k, v, prob, ctx, f_in, ln2, u, act, t))
    cache = (batch, ln0, layers, scale) if keep_cache else None
    return h, cache


def encode_backward(params: ModelParams, dh: np.ndarray, cache, hyper: HyperParams,
                    grads: ParamGradients) -> None:
    """Accumulate encoder gradients for upstream gradient ``dh`` into ``grads``."""
    batch, ln0, layers, scale = cache
    nh = hyper.heads
    H = hyper.hidden
    for i in reversed(range(hyper.layers)):
        p = f"layer{i}."
        a_in, ln1, q, k, v, prob, ctx, f_in, ln2, u, act, t = layers[i]
        # FFN block
        d2 = dh.reshape(-1, H)
        grads[p + "w2"] += act.reshape(-1, act.shape[-1]).T @ d2
        grads[p + "b2"] += d2.sum(0)
        dact = dh @ params[p + "w2"].T
        du = _gelu_back(dact, u, t)
        grads[p + "w1"] += f_in.reshape(-1, H).T @ du.reshape(-1, du.shape[-1])
        grads[p + "b1"] += du.reshape(-1, du.shape[-1]).sum(0)
        df_in = du @ params[p + "w1"].T
        dx, dg, db = _layernorm_back(df_in, ln2)
        grads[p + "ln2_g"] += dg
        grads[p + "ln2_b"] += db
        dh = dh + dx
        # attention block
        d2 = dh.reshape(-1, H)
        grads[p + "wo"] += ctx.reshape(-1, H).T @ d2
        grads[p + "bo"] += d2.sum(0)
        dctx = _split_heads(dh @ params[p + "wo"].T, nh)
        dprob = dctx @ v.transpose(0, 1, 3, 2)
        dv = prob.transpose(0, 1, 3, 2) @ dctx
        ds = prob * (dprob - (dprob * prob).sum(-1, keepdims=True))
        ds = ds * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        a2 = a_in.reshape(-1, H)
        da_in = np.zeros_like(a_in)
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dm = _merge_heads(dproj)
            grads[p + "w" + name] += a2.T @ dm.reshape(-1, H)
            grads[p + "b" + name] += dm.reshape(-1, H).sum(0)
            da_in += dm @ params[p + "w" + name].T
        dx, dg, db = _layernorm_back(da_in, ln1)
        grads[p + "ln1_g"] += dg
        grads[p + "ln1_b"] += db
        dh = dh + dx
    dx, dg, db = _layernorm_back(dh, ln0)
    grads["emb.ln_g"] += dg
    grads["emb.ln_b"] += db
    flat = dx.reshape(-1, H)
    for name, lane in (("emb.tok", batch.token_ids), ("emb.age", batch.age_ids),
                       ("emb.year", batch.year_ids), ("emb.seg", batch.segment_ids),
                       ("emb.pos", batch.position_ids)):
        np.add.at(grads[name], lane.reshape(-1), flat)


# --- heads and losses --------------------------------------------------------

def forward(params: ModelParams, batch: SequenceBatch, head: Head, hyper: HyperParams) -> np.ndarray:
    """MLM: (B, L, V) logits at every position. NEXT_VISIT: (B, G) logits from CLS."""
    h, _ = encode(params, batch, hyper)
    if Head(head) is Head.MLM:
        return h @ params["mlm.w"] + params["mlm.b"]
    return h[:, 0] @ params["nv.w"] + params["nv.b"]


@dataclass(frozen=True)
class MaskTargets:
    """Masked positions of a batch: parallel arrays of row, position and true token."""

    rows: np.ndarray
    positions: np.ndarray
    tokens: np.ndarray

    def __len__(self):
        return len(self.rows)

    @classmethod
    def from_triples(cls, triples) -> "MaskTargets":
        arr = np.asarray(list(triples), dtype=np.int64).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])


def _log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def mlm_loss(logits: np.ndarray, targets: MaskTargets) -> float:
    """Mean cross-entropy over masked positions; ``logits`` is (B, L, V)."""
    if len(targets) == 0:
        raise ValueError("empty MLM batch")
    z = logits[targets.rows, targets.positions]
    logp = _log_softmax(z.astype(np.float64) if z.dtype != np.float64 else z)
    return float(-logp[np.arange(len(targets)), targets.tokens].mean())


def _check_labels(labels: np.ndarray) -> None:
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")


def _bce_terms(logits, labels):
    return np.maximum(logits, 0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))


def nextvisit_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean elementwise binary cross-entropy on sigmoid(logits), overflow-free."""
    labels = np.asarray(labels)
    if logits.shape != labels.shape:
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    _check_labels(labels)
    z = logits.astype(np.float64)
    return float(_bce_terms(z, labels).mean())


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def zero_grads(params: ModelParams) -> ParamGradients:
    return {k: np.zeros_like(v) for k, v in params.items()}


def backward(params: ModelParams, batch: SequenceBatch, head: Head, targets,
             hyper: HyperParams) -> tuple[float, ParamGradients]:
    """Loss and gradients for every named tensor.

    ``targets`` is a MaskTargets for the MLM head and a (B, G) 0/1 array for
    the next-visit head. Gradients of the unused head are zero.
    """
    head = Head(head)
    h, cache = encode(params, batch, hyper, keep_cache=True)
    grads = zero_grads(params)
    dh = np.zeros_like(h)
    if head is Head.MLM:
        if len(targets) == 0:
            raise ValueError("empty MLM batch")
        hs = h[targets.rows, targets.positions]
        z = hs @ params["mlm.w"] + params["mlm.b"]
        logp = _log_softmax(z)
        n = len(targets)
        idx = np.arange(n)
        loss = float(-logp[idx, targets.tokens].astype(np.float64).mean())
        dz = np.exp(logp)
        dz[idx, targets.tokens] -= 1
        dz /= n
        grads["mlm.w"] += hs.T @ dz
        grads["mlm.b"] += dz.sum(0)
        np.add.at(dh, (targets.rows, targets.positions), dz @ params["mlm.w"].T)
    else:
        labels = np.asarray(targets)
        cls = h[:, 0]
        z = cls @ params["nv.w"] + params["nv.b"]
        if z.shape != labels.shape:
            raise ValueError(f"logits {z.shape} and labels {labels.shape} disagree")
        _check_labels(labels)
        lab = labels.astype(z.dtype)
        loss = float(_bce_terms(z, lab).astype(np.float64).mean())
        dz = (_sigmoid(z) - lab) / z.size
        grads["nv.w"] += cls.T @ dz
        grads["nv.b"] += dz.sum(0)
        dh[:, 0] = dz @ params["nv.w"].T
    encode_backward(params, dh, cache, hyper, grads)
    return loss, grads


def loss_only(params: ModelParams, batch: SequenceBatch, head: Head, targets, hyper: HyperParams):
    """The scalar that ``backward`` differentiates, as a numpy scalar of the params dtype."""
    head = Head(head)
    h, _ = encode(params, batch, hyper)
    if head is Head.MLM:
        z = h[targets.rows, targets.positions] @ params["mlm.w"] + params["mlm.b"]
        return -_log_softmax(z)[np.arange(len(targets)), targets.tokens].mean()
    z = h[:, 0] @ params["nv.w"] + params["nv.b"]
    return _bce_terms(z, np.asarray(targets).astype(z.dtype)).mean()
