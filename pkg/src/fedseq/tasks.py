"""MLM masking, training loops with model selection, and average precision."""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import (MASK, NUM_SPECIAL, NextVisitExample, PatientRecord, SequenceBatch,
                   Vocabulary, collate, encode_history, make_nextvisit_example, sample_pivot)
from .model import (Head, HyperParams, MaskTargets, ModelParams, backward, check_params, copy_params,
                    encode, head_param_names, init_params)
from .optim import AdamState, adam_step

VALIDATION_FRACTION = 0.1


def stream_rng(seed: int, stream: str, *index: int) -> np.random.Generator:
    """Independent generator for (seed, named stream, indices)."""
    return np.random.default_rng([seed, zlib.crc32(stream.encode()), *index])


# --- masking -----------------------------------------------------------------

@dataclass
class MaskedBatch:
    sequences: SequenceBatch
    targets: MaskTargets


def disease_positions(token_ids: np.ndarray) -> np.ndarray:
    return token_ids >= NUM_SPECIAL


def mask_batch(batch: SequenceBatch, mask_prob: float, rng: np.random.Generator,
               vocab_size: int) -> MaskedBatch:
    """BERT-style corruption of disease tokens (80% MASK, 10% random, 10% kept).

    If no position is selected the draw is repeated once; if that also comes
    up empty a single disease position is forced.
    """
    if not 0 <= mask_prob < 1:
        raise ValueError("mask_prob must lie in [0, 1)")
    tok = batch.token_ids
    eligible = disease_positions(tok)
    if not eligible.any():
        raise ValueError("batch has no disease tokens to mask")
    selected = (rng.random(tok.shape) < mask_prob) & eligible
    if not selected.any():
        selected = (rng.random(tok.shape) < mask_prob) & eligible
    if not selected.any():
        flat = np.flatnonzero(eligible)
        selected = np.zeros(tok.shape, dtype=bool)
        selected.flat[flat[rng.integers(len(flat))]] = True
    rows, positions = np.nonzero(selected)
    original = tok[rows, positions]
    r = rng.random(len(rows))
    random_tokens = rng.integers(NUM_SPECIAL, vocab_size, size=len(rows))
    replaced = np.where(r < 0.8, MASK, np.where(r < 0.9, random_tokens, original))
    new_tok = tok.copy()
    new_tok[rows, positions] = replaced
    return MaskedBatch(batch.replace_tokens(new_tok), MaskTargets(rows, positions, original))


# --- metrics -----------------------------------------------------------------

def average_precision(scores, relevance) -> float:
    """Micro AP: mean of precision@k over the ranks k holding a positive.

    Ranking is by descending score; ties keep the original order.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    rel = np.asarray(relevance).ravel()
    if scores.shape != rel.shape or scores.size == 0:
        raise ValueError("scores and relevance must be non-empty and of equal length")
    if not np.isin(rel, (0, 1)).all():
        raise ValueError("relevance must be 0/1")
    n_pos = int(rel.sum())
    if n_pos == 0:
        raise ValueError("undefined AP: no positive labels")
    order = np.argsort(-scores, kind="stable")
    hits = rel[order].astype(np.float64)
    precision_at_k = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision_at_k[hits == 1].sum() / n_pos)


def _batches(n: int, batch_size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def predict_nextvisit(params: ModelParams, examples: Sequence[NextVisitExample], hyper: HyperParams) -> np.ndarray:
    """Sigmoid scores, shape (n_examples, G)."""
    out = []
    for rows in _batches(len(examples), max(hyper.batch_size, 64)):
        batch = collate([examples[i].input for i in rows]).trim()
        h, _ = encode(params, batch, hyper)
        z = (h[:, 0] @ params["nv.w"] + params["nv.b"]).astype(np.float64)
        out.append(1.0 / (1.0 + np.exp(-z)))
    return np.concatenate(out) if out else np.zeros((0, hyper.groups))


def nextvisit_ap(params: ModelParams, examples: Sequence[NextVisitExample], hyper: HyperParams) -> float:
    if not examples:
        raise ValueError("no evaluation examples")
    scores = predict_nextvisit(params, examples, hyper)
    labels = np.stack([e.labels for e in examples])
    return average_precision(scores.ravel(), labels.ravel())


def mlm_sequences(patients: Sequence[PatientRecord], vocab: Vocabulary, L: int):
    """Full-history encodings that hold at least one disease token."""
    seqs = [encode_history(p, p.num_visits, vocab, L) for p in patients]
    return [s for s in seqs if disease_positions(s.token_ids).any()]


def mlm_precision(params: ModelParams, sequences, hyper: HyperParams, eval_seed: int,
                  mask_prob: Optional[float] = None) -> float:
    """Fraction of masked positions whose argmax MLM prediction is the original token."""
    if not sequences:
        raise ValueError("empty MLM evaluation set")
    mask_prob = hyper.mask_prob if mask_prob is None else mask_prob
    rng = np.random.default_rng(eval_seed)
    hits = total = 0
    for rows in _batches(len(sequences), max(hyper.batch_size, 64)):
        masked = mask_batch(collate([sequences[i] for i in rows]).trim(), mask_prob, rng, hyper.vocab)
        h, _ = encode(params, masked.sequences, hyper)
        t = masked.targets
        z = h[t.rows, t.positions] @ params["mlm.w"] + params["mlm.b"]
        hits += int((z.argmax(-1) == t.tokens).sum())
        total += len(t)
    return hits / total


# --- training ----------------------------------------------------------------

@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def add(self, epoch: int, train_loss: float, val_metric: float) -> None:
        self.records.append({"epoch": epoch, "train_loss": train_loss, "val_metric": val_metric})

    @property
    def selected_epoch(self) -> Optional[int]:
        if not self.records:
            return None
        metrics = [r["val_metric"] for r in self.records]
        return self.records[int(np.argmax(metrics))]["epoch"]

    @property
    def best_metric(self) -> Optional[float]:
        return max((r["val_metric"] for r in self.records), default=None)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_metric"])
            for r in self.records:
                w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_metric"])])


def mlm_epoch(params, opt: AdamState, sequences, hyper: HyperParams, rng: np.random.Generator):
    """One shuffled pass of masked-token training; returns (params, opt, mean loss)."""
    losses = []
    order = rng.permutation(len(sequences))
    for rows in _batches(len(sequences), hyper.batch_size, order):
        masked = mask_batch(collate([sequences[i] for i in rows]).trim(), hyper.mask_prob, rng, hyper.vocab)
        loss, grads = backward(params, masked.sequences, Head.MLM, masked.targets, hyper)
        params, opt = adam_step(params, grads, opt, hyper)
        losses.append(loss)
    return params, opt, float(np.mean(losses))


def nextvisit_epoch(params, opt: AdamState, patients: Sequence[PatientRecord], vocab: Vocabulary,
                    hyper: HyperParams, rng: np.random.Generator):
    """One pass over patients with a fresh random pivot per patient."""
    losses = []
    order = rng.permutation(len(patients))
    pivots = {int(i): sample_pivot(patients[i], rng) for i in order}
    for rows in _batches(len(patients), hyper.batch_size, order):
        examples = [make_nextvisit_example(patients[i], pivots[int(i)], vocab, hyper.max_len) for i in rows]
        batch = collate([e.input for e in examples]).trim()
        labels = np.stack([e.labels for e in examples])
        loss, grads = backward(params, batch, Head.NEXT_VISIT, labels, hyper)
        params, opt = adam_step(params, grads, opt, hyper)
        losses.append(loss)
    return params, opt, float(np.mean(losses))


def eligible_nextvisit(patients: Sequence[PatientRecord]) -> list[PatientRecord]:
    return [p for p in patients if p.num_visits >= 2]


def prepare_init(init: Optional[ModelParams], hyper: HyperParams, seed: int, head: Head) -> ModelParams:
    """Starting point for a training run.

    No ``init`` means fresh parameters. For the next-visit head, the
    classifier is re-drawn from the seeded initialization while every other
    tensor is copied from ``init``.
    """
    fresh = init_params(hyper, seed)
    if init is None:
        return fresh
    check_params(init, hyper)
    params = copy_params(init)
    if Head(head) is Head.NEXT_VISIT:
        for name in head_param_names(Head.NEXT_VISIT):
            params[name] = fresh[name]
    return params


def run_epochs(task: Head, params: ModelParams, opt: AdamState, train, val_fn, hyper: HyperParams,
               vocab: Vocabulary, epoch_numbers, seed: int, stream: str):
    """Shared epoch loop: train, validate, keep the first best epoch's params."""
    log = TrainLog()
    best, best_metric = None, -np.inf
    for epoch in epoch_numbers:
        rng = stream_rng(seed, stream, epoch)
        if task is Head.MLM:
            params, opt, loss = mlm_epoch(params, opt, train, hyper, rng)
        else:
            params, opt, loss = nextvisit_epoch(params, opt, train, vocab, hyper, rng)
        metric = val_fn(params)
        log.add(epoch, loss, metric)
        if metric > best_metric:
            best, best_metric = params, metric
    return best, params, opt, log


def train_mlm(train: Sequence[PatientRecord], val: Sequence[PatientRecord], hyper: HyperParams,
              vocab: Vocabulary, epochs: int, seed: int, init: Optional[ModelParams] = None,
              stream: str = "central") -> tuple[ModelParams, TrainLog]:
    """Masked-token pretraining; returns the parameters of the best-precision epoch."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    seqs = mlm_sequences(train, vocab, hyper.max_len)
    val_seqs = mlm_sequences(val, vocab, hyper.max_len)
    if not seqs or not val_seqs:
        raise ValueError("MLM training needs non-empty train and validation sets")
    params = prepare_init(init, hyper, seed, Head.MLM)
    best, _, _, log = run_epochs(
        Head.MLM, params, AdamState.zeros_like(params), seqs,
        lambda p: mlm_precision(p, val_seqs, hyper, eval_seed=seed), hyper, vocab,
        range(1, epochs + 1), seed, stream)
    return best, log


def train_nextvisit(train: Sequence[PatientRecord], val: Sequence[PatientRecord],
                    init: Optional[ModelParams], hyper: HyperParams, vocab: Vocabulary, epochs: int,
                    seed: int, stream: str = "central") -> tuple[ModelParams, TrainLog]:
    """Fine-tune every tensor on next-visit prediction; select by validation AP."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    patients = eligible_nextvisit(train)
    val_examples = build_val_examples(val, vocab, hyper, seed)
    if not patients:
        raise ValueError("no training patient has a next visit")
    params = prepare_init(init, hyper, seed, Head.NEXT_VISIT)
    best, _, _, log = run_epochs(
        Head.NEXT_VISIT, params, AdamState.zeros_like(params), patients,
        lambda p: nextvisit_ap(p, val_examples, hyper), hyper, vocab,
        range(1, epochs + 1), seed, stream)
    return best, log


def build_val_examples(val: Sequence[PatientRecord], vocab: Vocabulary, hyper: HyperParams,
                       seed: int) -> list[NextVisitExample]:
    rng = stream_rng(seed, "val-pivots")
    examples = [make_nextvisit_example(p, sample_pivot(p, rng), vocab, hyper.max_len)
                for p in eligible_nextvisit(val)]
    if not examples:
        raise ValueError("validation set has no patient with a next visit")
    return examples


def split_validation(patients: Sequence[PatientRecord], seed: int, stream: str = "",
                     fraction: float = VALIDATION_FRACTION) -> tuple[list, list]:
    """Patient-level (train, val) split holding out ``fraction`` (at least one patient)."""
    n = len(patients)
    if n < 2:
        raise ValueError("need at least 2 patients to carve out a validation set")
    n_val = min(max(1, int(np.floor(fraction * n + 0.5))), n - 1)
    order = stream_rng(seed, "val-split:" + stream).permutation(n)
    held = set(order[:n_val].tolist())
    return ([p for i, p in enumerate(patients) if i not in held],
            [p for i, p in enumerate(patients) if i in held])
