"""In-process parameter-server simulation of synchronous data-parallel MAMDR.

Each round the server broadcasts a snapshot of the global state.  Every worker
runs one local MAMDR epoch on its shard from that snapshot and sends back its
endpoint; the server replaces the global state by the mean of the endpoints,
which is the snapshot plus the mean worker delta.  Workers never see each
other's updates, so the result does not depend on scheduling.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import SPLIT_CODE, MultiDomainDataset
from .errors import DivergenceError, LayoutError
from .metrics import evaluate
from .nn import ParamVector
from .optim import OptState
from .problem import DomainProblem
from .strategies import MdrState, mamdr_epoch

log = logging.getLogger(__name__)

ROUND_LOG_HEADER = ["round", "worker_count", "mean_delta_norm", "macro_auc"]


@dataclass
class WorkerShard:
    worker_id: int
    local_data: MultiDomainDataset
    local_state: MdrState = None
    absent_domains: tuple = ()


@dataclass
class ServerState:
    global_state: MdrState
    round: int = 0
    aggregation: str = "mean"
    last_deltas: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.round < 0:
            raise ValueError("round must be >= 0")
        if self.aggregation != "mean":
            raise ValueError(f"unsupported aggregation {self.aggregation!r}")


def partition(data, m, seed=0):
    """Split ``data`` row-disjointly across ``m`` workers.

    Rows are dealt round-robin after a seeded shuffle within every
    (domain, split) group, so each worker gets an equal share of each domain
    (up to one row).  Rows keep their original order inside a shard, which
    makes ``m=1`` return the dataset unchanged.  Domains without training rows
    on a worker are listed in ``absent_domains``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = np.random.default_rng(seed)
    owners = []
    offset = 0
    for dom in data.domains:
        owner = np.empty(len(dom), dtype=np.int64)
        for code in sorted(SPLIT_CODE.values()):
            idx = np.flatnonzero(dom.split == code)
            perm = rng.permutation(len(idx))
            owner[idx[perm]] = (np.arange(len(idx)) + offset) % m
            offset += len(idx)
        owners.append(owner)
    shards = []
    train = SPLIT_CODE["train"]
    for w in range(m):
        doms = [dom.subset(np.flatnonzero(owner == w)) for dom, owner in zip(data.domains, owners)]
        absent = tuple(d.domain_id for d in doms if not np.any(d.split == train))
        if absent:
            log.info("worker %d has no training rows for domains %s", w, absent)
        shards.append(WorkerShard(w, MultiDomainDataset(doms, data.num_users, data.num_items), None, absent))
    return shards


class _LocalProblem(DomainProblem):
    """A shard's training rows; domains with no local rows yield no batches."""

    def batches(self, domain, rng, n_batches, batch_size):
        if self.n_rows(domain) == 0:
            return []
        return super().batches(domain, rng, n_batches, batch_size)


def _local_epoch(snapshot, shard, cfg, epoch):
    problem = _LocalProblem(snapshot.spec, shard.local_data)
    try:
        return mamdr_epoch(snapshot, problem, cfg, epoch, stream=shard.worker_id)
    except DivergenceError as exc:
        err = DivergenceError(str(exc), worker=shard.worker_id)
        err.domain = exc.domain
        raise err from exc


def _mean_vectors(vectors):
    first = vectors[0]
    for v in vectors[1:]:
        first._check(v)
    return ParamVector(np.mean(np.stack([v.values for v in vectors]), axis=0), first.layout)


def _mean_opt_states(states):
    s = states[0]
    return replace(
        s,
        step_count=max(o.step_count for o in states),
        moment1=_mean_vectors([o.moment1 for o in states]),
        moment2=_mean_vectors([o.moment2 for o in states]),
    )


def _mean_aux(auxes):
    out = {}
    for key in auxes[0]:
        values = [a[key] for a in auxes]
        if isinstance(values[0], OptState):
            out[key] = _mean_opt_states(values)
        elif isinstance(values[0], ParamVector):
            out[key] = _mean_vectors(values)
        else:
            out[key] = values[0]
    return out


def aggregate(snapshot, endpoints):
    """Mean of the worker endpoints (equivalently snapshot + mean delta)."""
    for e in endpoints:
        if len(e.specific) != len(snapshot.specific):
            raise LayoutError("worker state has a different number of domains")
        snapshot.shared._check(e.shared)
    shared = _mean_vectors([e.shared for e in endpoints])
    specific = tuple(
        _mean_vectors([e.specific[i] for e in endpoints]) for i in range(snapshot.n_domains)
    )
    return replace(snapshot, shared=shared, specific=specific, aux=_mean_aux([e.aux for e in endpoints]))


def state_delta(after, before):
    """Concatenated (shared, specific...) difference as one flat array."""
    return np.concatenate([(a - b).values for a, b in zip(after.params(), before.params())])


def run_round(server, shards, cfg, threads=1):
    """One synchronous round; returns a new :class:`ServerState`."""
    snapshot = server.global_state
    cfg.check_domains(snapshot.n_domains)
    epoch = server.round
    if threads > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            endpoints = list(pool.map(lambda s: _local_epoch(snapshot, s, cfg, epoch), shards))
    else:
        endpoints = [_local_epoch(snapshot, s, cfg, epoch) for s in shards]
    for shard, end in zip(shards, endpoints):
        shard.local_state = end
    deltas = [state_delta(e, snapshot) for e in endpoints]
    return ServerState(aggregate(snapshot, endpoints), server.round + 1, server.aggregation, deltas)


def run(server, shards, cfg, rounds, eval_data=None, eval_split="val", threads=1):
    """Apply ``rounds`` rounds; returns the final server and the per-round log."""
    rows = []
    for _ in range(rounds):
        server = run_round(server, shards, cfg, threads)
        norm = float(np.mean([np.linalg.norm(d) for d in server.last_deltas]))
        auc = float("nan")
        if eval_data is not None:
            auc = evaluate(server.global_state, eval_data, eval_split).macro_auc
        rows.append({"round": server.round, "worker_count": len(shards), "mean_delta_norm": norm, "macro_auc": auc})
        log.info("round %d %s", server.round, rows[-1])
    return server, rows


def write_round_log(rows, path):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, ROUND_LOG_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path
