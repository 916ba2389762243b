"""Shared builders for model-level tests."""

import numpy as np

from fedseq.data import SequenceBatch
from fedseq.model import HyperParams, MaskTargets, backward, init_params, loss_only

TINY = HyperParams(hidden=8, layers=1, heads=2, ffn_dim=16, max_len=8, vocab=10, groups=5,
                   age_buckets=6, year_buckets=4)


def tiny_batch(rng) -> SequenceBatch:
    tok = np.array([[2, 5, 6, 3, 7, 3, 0, 0], [2, 8, 3, 0, 0, 0, 0, 0]])
    seg = np.array([[0, 0, 0, 0, 1, 1, 0, 0], [0] * 8])
    pos = np.array([[0, 0, 1, 2, 0, 1, 0, 0], [0, 0, 1, 0, 0, 0, 0, 0]])
    return SequenceBatch(tok, rng.integers(0, 6, (2, 8)), rng.integers(0, 4, (2, 8)), seg, pos,
                         (tok != 0).astype(np.int64))


def tiny_targets():
    return {
        "MLM": MaskTargets.from_triples([(0, 1, 5), (0, 4, 9), (1, 1, 8)]),
        "NEXT_VISIT": np.array([[1, 0, 0, 1, 0], [0, 1, 0, 0, 0]]),
    }


def perturbed_params(hyper, rng, dtype=np.longdouble):
    """Init params pushed away from the symmetric init so every gradient is informative."""
    params = {}
    for k, v in init_params(hyper, 0, np.float64).items():
        if k.endswith("_g"):
            params[k] = 1 + rng.normal(0, 0.3, v.shape)
        else:
            params[k] = rng.normal(0, 0.5, v.shape)
    return {k: v.astype(dtype) for k, v in params.items()}


def gradient_check(params, batch, head, targets, hyper, step=1e-4):
    """Max relative error of analytic vs central-difference gradients, and the worst tensor."""
    _, grads = backward(params, batch, head, targets, hyper)
    worst, where = 0.0, None
    for name, p in params.items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            up = loss_only(params, batch, head, targets, hyper)
            p[idx] = old - step
            down = loss_only(params, batch, head, targets, hyper)
            p[idx] = old
            fd = (up - down) / (2 * step)
            a = grads[name][idx]
            err = float(abs(a - fd) / max(abs(a), abs(fd), 1e-8))
            if err > worst:
                worst, where = err, name
    return worst, where
