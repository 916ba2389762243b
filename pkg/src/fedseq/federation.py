"""FedAvg rounds for both training phases, plus centralized and local-only baselines."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .centers import ClientDataset
from .data import NextVisitExample, PatientRecord, Vocabulary
from .model import Head, HyperParams, ModelParams, copy_params
from .optim import AdamState
from .tasks import (TrainLog, build_val_examples, eligible_nextvisit, mlm_epoch, mlm_precision, mlm_sequences,
                    nextvisit_ap, nextvisit_epoch, prepare_init, split_validation, stream_rng, train_mlm,
                    train_nextvisit)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FederationConfig:
    """FedAvg knobs.

    With ``persist_client_optimizer`` each client keeps its Adam moments
    between the rounds it takes part in; otherwise every local update starts
    from fresh moments.
    """

    hyper: HyperParams
    client_fraction: float = 0.1
    rounds: int = 20
    local_epochs: int = 1
    task: Head = Head.NEXT_VISIT
    seed: int = 0
    persist_client_optimizer: bool = False

    def __post_init__(self):
        if not 0 < self.client_fraction <= 1:
            raise ValueError("client_fraction must lie in (0, 1]")
        if self.rounds < 1 or self.local_epochs < 1:
            raise ValueError("rounds and local_epochs must be >= 1")
        object.__setattr__(self, "task", Head(self.task))


@dataclass
class ClientUpdate:
    params: ModelParams
    num_examples: int
    client_id: str
    local_loss: float = float("nan")
    opt_state: Optional[AdamState] = None


@dataclass
class RoundLog:
    round: int
    selected: list
    local_losses: dict
    num_examples: dict
    val_metric: float


def num_selected(num_clients: int, fraction: float) -> int:
    return max(1, int(np.floor(fraction * num_clients + 0.5)))


def select_clients(client_ids: Sequence[str], fraction: float, rng: np.random.Generator) -> list[str]:
    """Uniform sample without replacement of max(1, round(fraction*K)) ids, in input order."""
    k = len(client_ids)
    if k < 1:
        raise ValueError("no clients to select from")
    m = num_selected(k, fraction)
    picked = np.sort(rng.choice(k, size=m, replace=False))
    return [client_ids[i] for i in picked]


def client_examples(client: ClientDataset, task: Head, vocab: Vocabulary, hyper: HyperParams):
    if Head(task) is Head.MLM:
        return mlm_sequences(client.patients, vocab, hyper.max_len)
    return eligible_nextvisit(client.patients)


def local_update(global_params: ModelParams, client: ClientDataset, config: FederationConfig,
                 round_index: int, vocab: Vocabulary, opt_state: Optional[AdamState] = None,
                 examples=None) -> ClientUpdate:
    """Train a copy of the global model for E local epochs on one client.

    Epoch randomness comes from (seed, client id, global epoch number), so
    the result does not depend on which other clients ran first.
    """
    hyper = config.hyper
    if examples is None:
        examples = client_examples(client, config.task, vocab, hyper)
    if not examples:
        raise ValueError(f"client {client.center_id} has no training examples for {config.task.value}")
    params = copy_params(global_params)
    opt = opt_state.copy() if opt_state is not None else AdamState.zeros_like(params)
    losses = []
    for e in range(config.local_epochs):
        epoch = (round_index - 1) * config.local_epochs + e + 1
        rng = stream_rng(config.seed, client.center_id, epoch)
        if config.task is Head.MLM:
            params, opt, loss = mlm_epoch(params, opt, examples, hyper, rng)
        else:
            params, opt, loss = nextvisit_epoch(params, opt, examples, vocab, hyper, rng)
        losses.append(loss)
    return ClientUpdate(params, len(examples), client.center_id, float(losses[-1]), opt)


def aggregate(updates: Sequence[ClientUpdate]) -> ModelParams:
    """Sample-size weighted average of every tensor.

    Updates are combined in client-id order as ``w0 + sum_k p_k (w_k - w0)``,
    which makes the result independent of input order and exact when all
    updates agree.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    ups = sorted(updates, key=lambda u: u.client_id)
    for u in ups:
        if u.num_examples <= 0:
            raise ValueError(f"client {u.client_id} reports {u.num_examples} examples")
    ref = ups[0].params
    for u in ups[1:]:
        if set(u.params) != set(ref):
            raise ValueError(f"client {u.client_id}: tensor names differ from client {ups[0].client_id}")
        for name, arr in u.params.items():
            if arr.shape != ref[name].shape:
                raise ValueError(f"tensor {name!r} from client {u.client_id} has shape {arr.shape}, "
                                 f"expected {ref[name].shape}")
    if len(ups) == 1:
        return copy_params(ref)
    total = float(sum(u.num_examples for u in ups))
    weights = [u.num_examples / total for u in ups]
    out = {}
    for name, base in ref.items():
        base64 = base.astype(np.float64)
        acc = np.zeros_like(base64)
        for w, u in zip(weights[1:], ups[1:]):
            acc += w * (u.params[name].astype(np.float64) - base64)
        out[name] = (base64 + acc).astype(base.dtype)
    return out


def _validator(task: Head, val: Sequence[PatientRecord], vocab: Vocabulary, hyper: HyperParams,
               seed: int) -> Callable[[ModelParams], float]:
    if task is Head.MLM:
        seqs = mlm_sequences(val, vocab, hyper.max_len)
        if not seqs:
            raise ValueError("empty MLM validation set")
        return lambda p: mlm_precision(p, seqs, hyper, eval_seed=seed)
    examples = build_val_examples(val, vocab, hyper, seed)
    return lambda p: nextvisit_ap(p, examples, hyper)


def run_fedavg(clients: Sequence[ClientDataset], config: FederationConfig, val: Sequence[PatientRecord],
               vocab: Vocabulary, init: Optional[ModelParams] = None,
               on_round: Optional[Callable[[RoundLog, ModelParams], None]] = None):
    """FedAvg for a fixed round budget; returns the best-validation global params and round logs."""
    hyper, task = config.hyper, config.task
    data = {}
    for c in clients:
        ex = client_examples(c, task, vocab, hyper)
        if ex:
            data[c.center_id] = (c, ex)
        else:
            log.warning("client %s has no %s examples; left out of federation", c.center_id, task.value)
    if not data:
        raise ValueError("no client has training examples")
    ids = sorted(data)
    validate = _validator(task, val, vocab, hyper, config.seed)
    global_params = prepare_init(init, hyper, config.seed, task)
    opt_states: dict[str, AdamState] = {}
    best, best_metric = global_params, -np.inf
    rounds = []
    for r in range(1, config.rounds + 1):
        selected = select_clients(ids, config.client_fraction, stream_rng(config.seed, "select", r))
        updates = []
        for cid in selected:
            client, ex = data[cid]
            up = local_update(global_params, client, config, r, vocab,
                              opt_states.get(cid) if config.persist_client_optimizer else None, ex)
            if config.persist_client_optimizer:
                opt_states[cid] = up.opt_state
            updates.append(up)
        global_params = aggregate(updates)
        metric = validate(global_params)
        entry = RoundLog(r, selected, {u.client_id: u.local_loss for u in updates},
                         {u.client_id: u.num_examples for u in updates}, metric)
        rounds.append(entry)
        if on_round is not None:
            on_round(entry, global_params)
        if metric > best_metric:
            best, best_metric = global_params, metric
    return best, rounds


def best_round(rounds: Sequence[RoundLog]) -> int:
    return rounds[int(np.argmax([r.val_metric for r in rounds]))].round


def write_round_log(rounds: Sequence[RoundLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "client_id", "n_examples", "local_loss", "global_val_metric"])
        for r in rounds:
            for cid in r.selected:
                w.writerow([r.round, cid, r.num_examples[cid], repr(r.local_losses[cid]), repr(r.val_metric)])


def pool(clients: Sequence[ClientDataset]) -> list[PatientRecord]:
    return [p for c in clients for p in c.patients]


def run_centralized(train: Sequence[PatientRecord], val: Sequence[PatientRecord], config: FederationConfig,
                    vocab: Vocabulary, init: Optional[ModelParams] = None, epochs: Optional[int] = None,
                    stream: str = "central") -> tuple[ModelParams, TrainLog]:
    """Pooled-data training for ``epochs`` (default rounds x local_epochs)."""
    epochs = config.rounds * config.local_epochs if epochs is None else epochs
    if config.task is Head.MLM:
        return train_mlm(train, val, config.hyper, vocab, epochs, config.seed, init=init, stream=stream)
    return train_nextvisit(train, val, init, config.hyper, vocab, epochs, config.seed, stream=stream)


@dataclass
class LocalResult:
    params: dict
    ap: dict
    num_examples: dict
    weighted_ap: float
    skipped: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)


def weighted_average(values: Sequence[float], counts: Sequence[int]) -> float:
    total = sum(counts)
    if total <= 0:
        raise ValueError("weights sum to zero")
    return float(sum(v * n for v, n in zip(values, counts)) / total)


def run_local_baseline(clients: Sequence[ClientDataset], config: FederationConfig,
                       test_sets: dict[str, Sequence[NextVisitExample]], vocab: Vocabulary,
                       mlm_epochs: int, nextvisit_epochs: int, pretrain: bool = True,
                       val_sets: Optional[dict] = None, mlm_clients: Optional[Sequence[ClientDataset]] = None,
                       mlm_val_sets: Optional[dict] = None) -> LocalResult:
    """Each client pretrains and fine-tunes on its own data only.

    Validation patients come from ``val_sets`` (client id -> patients) when
    given, else 10% of the client's shard is held out. ``mlm_clients`` and
    ``mlm_val_sets`` optionally supply different shards for the MLM phase.
    The summary is the train-size weighted mean of per-client test APs.
    """
    hyper, seed = config.hyper, config.seed
    mlm_shards = {c.center_id: c for c in (mlm_clients or clients)}
    result = LocalResult({}, {}, {}, float("nan"))

    def train_val(patients, vals, cid, stream):
        if vals is not None and vals.get(cid):
            return list(patients), list(vals[cid])
        return split_validation(patients, seed, stream + cid)

    for c in clients:
        cid = c.center_id
        tests = [e for e in test_sets.get(cid, []) if e.labels.any()]
        if not tests:
            result.skipped[cid] = "no test examples"
            continue
        train_patients = eligible_nextvisit(c.patients)
        if not train_patients:
            result.skipped[cid] = "no training patient with a next visit"
            continue
        try:
            init = None
            if pretrain:
                shard = mlm_shards.get(cid, c)
                m_train, m_val = train_val(shard.patients, mlm_val_sets if mlm_clients else val_sets,
                                           cid, "local-mlm:")
                init, mlog = train_mlm(m_train, m_val, hyper, vocab, mlm_epochs, seed,
                                       stream="local-mlm:" + cid)
                result.logs[cid + ":mlm"] = mlog
            n_train, n_val = train_val(train_patients, val_sets, cid, "local-nv:")
            params, nlog = train_nextvisit(n_train, n_val, init, hyper, vocab, nextvisit_epochs, seed,
                                           stream="local-nv:" + cid)
            result.logs[cid + ":nv"] = nlog
        except ValueError as exc:
            result.skipped[cid] = str(exc)
            continue
        result.params[cid] = params
        result.ap[cid] = nextvisit_ap(params, tests, hyper)
        result.num_examples[cid] = len(train_patients)
    if not result.ap:
        raise ValueError("no client could be trained and evaluated locally")
    ids = sorted(result.ap)
    result.weighted_ap = weighted_average([result.ap[i] for i in ids], [result.num_examples[i] for i in ids])
    for cid, why in result.skipped.items():
        log.info("local baseline skipped client %s: %s", cid, why)
    return result
