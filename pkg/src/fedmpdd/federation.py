"""FedSGD-style round engine with pluggable uplink compressors.

One round: sample round(beta * N) clients, let each compute a mini-batch
gradient at the broadcast model and compress it, decompress and average the
messages on the server in ascending client order, then take one SGD step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .compressors import (
    PURPOSE_BATCH,
    PURPOSE_SAMPLE,
    CompressorConfig,
    RoundContext,
    compress,
    decompress,
    message_bytes,
    rng_for,
)
from .data import ClientShard, Dataset
from .models import Batch, ModelKind, ModelState, evaluate, loss_and_grad, sgd_step

log = logging.getLogger(__name__)

STOP_ROUNDS = "rounds_completed"
STOP_BUDGET = "budget_exceeded"
STOP_BUDGET_FIRST = "budget_exceeded_first_iteration"
STOP_TARGET = "target_reached"


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelKind
    clients: int
    beta: float
    rounds: int
    eta: float
    batch_size: int
    compressor: CompressorConfig
    master_seed: int = 0
    byte_budget: Optional[int] = None
    target_accuracy: Optional[float] = None
    eval_every: int = 1

    def __post_init__(self):
        if self.clients < 1:
            raise ValueError("clients must be >= 1")
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.byte_budget is not None and self.byte_budget < 0:
            raise ValueError("byte budget must be >= 0")
        if self.target_accuracy is not None and not 0 <= self.target_accuracy <= 1:
            raise ValueError("target accuracy must lie in [0, 1]")

    @property
    def clients_per_round(self) -> int:
        return participation_count(self.clients, self.beta)

    @property
    def round_bytes(self) -> int:
        return self.clients_per_round * message_bytes(self.compressor, self.model.num_params)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    train_loss: float
    test_accuracy: Optional[float]
    uplink_bytes: int
    cumulative_bytes: int
    grad_estimate_norm_sq: float


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    reason: str
    state: ModelState
    evaluations: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def used_bytes(self) -> int:
        return self.records[-1].cumulative_bytes if self.records else 0

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.evaluations[-1][2] if self.evaluations else None


def participation_count(N: int, beta: float) -> int:
    # round half away from zero, never below one client
    return max(1, min(N, int(np.floor(beta * N + 0.5))))


def sample_clients(N: int, beta: float, rng: np.random.Generator) -> list[int]:
    if N < 1:
        raise ValueError("N must be >= 1")
    if not 0 < beta <= 1:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    count = participation_count(N, beta)
    if count == N:
        return list(range(N))
    return sorted(int(i) for i in rng.choice(N, size=count, replace=False))


class BatchCursor:
    """Each client walks through its shard in seed-shuffled epochs.

    The t-th mini-batch of client i covers positions [t*B, (t+1)*B) of the
    concatenation of per-epoch permutations seeded by (master, i, epoch).
    """

    def __init__(self, master_seed: int):
        self.master_seed = master_seed
        self.steps: dict[int, int] = {}

    def _perm(self, client: int, epoch: int, n: int) -> np.ndarray:
        return rng_for(self.master_seed, epoch, client, PURPOSE_BATCH).permutation(n)

    def next_batch(self, client: int, shard: ClientShard, batch_size: int) -> np.ndarray:
        n = len(shard)
        if n == 0:
            raise ValueError(f"client {client} has an empty shard")
        t = self.steps.get(client, 0)
        self.steps[client] = t + 1
        B = min(batch_size, n)
        start = t * B
        positions = np.arange(start, start + B)
        out = np.empty(B, dtype=np.int64)
        for epoch in np.unique(positions // n):
            sel = positions // n == epoch
            out[sel] = self._perm(client, int(epoch), n)[positions[sel] % n]
        return shard.indices[out]


def run_round(
    state: ModelState,
    dataset: Dataset,
    shards: list[ClientShard],
    cfg: ExperimentConfig,
    k: int,
    cursor: Optional[BatchCursor] = None,
    cumulative_bytes: int = 0,
) -> tuple[ModelState, RoundRecord]:
    model = cfg.model
    d = model.num_params
    if state.dim != d:
        raise ValueError(f"state has {state.dim} params, model expects {d}")
    if len(shards) != cfg.clients:
        raise ValueError(f"got {len(shards)} shards for {cfg.clients} clients")
    cursor = cursor if cursor is not None else BatchCursor(cfg.master_seed)
    chosen = sample_clients(cfg.clients, cfg.beta, rng_for(cfg.master_seed, k, 0, PURPOSE_SAMPLE))

    total = np.zeros(d)
    losses = []
    round_bytes = 0
    for i in chosen:
        idx = cursor.next_batch(i, shards[i], cfg.batch_size)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = loss_and_grad(model, state, Batch(dataset.inputs[idx], dataset.labels[idx]))
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise FloatingPointError(f"training diverged at round {k} (client {i})")
        msg = compress(cfg.compressor, grad, RoundContext(k, i, cfg.master_seed))
        round_bytes += msg.byte_size
        losses.append(loss)
        total += decompress(cfg.compressor, msg, d)
    estimate = total / len(chosen)
    with np.errstate(over="ignore"):
        stepped = state.params - cfg.eta * estimate
    if not np.all(np.isfinite(stepped)):
        raise FloatingPointError(f"training diverged at round {k}")
    new_state = sgd_step(state, estimate, cfg.eta)
    record = RoundRecord(
        round=k,
        train_loss=float(np.mean(losses)),
        test_accuracy=None,
        uplink_bytes=round_bytes,
        cumulative_bytes=cumulative_bytes + round_bytes,
        grad_estimate_norm_sq=float(estimate @ estimate),
    )
    return new_state, record


def fedpdd_round(state, dataset, shards, cfg: ExperimentConfig, k, cursor=None, cumulative_bytes=0):
    """Single-direction round: :func:`run_round` with an mpdd(m=1) compressor."""
    cfg = replace(cfg, compressor=CompressorConfig("mpdd", m=1))
    return run_round(state, dataset, shards, cfg, k, cursor, cumulative_bytes)


def run_experiment(
    cfg: ExperimentConfig,
    train: Dataset,
    shards: list[ClientShard],
    test: Optional[Dataset] = None,
    init: Optional[ModelState] = None,
    on_round: Optional[Callable[[RoundRecord], None]] = None,
) -> ExperimentResult:
    """Run rounds until K, the byte budget, or the accuracy target stops training.

    A round only runs if its whole cost fits in the remaining budget.
    Accuracy is measured after every ``eval_every``-th round on ``test``
    (or on ``train`` when no test set is given).
    """
    if len(shards) != cfg.clients:
        raise ValueError(f"got {len(shards)} shards for {cfg.clients} clients")
    for shard in shards:
        if len(shard) == 0:
            raise ValueError(f"client {shard.owner} has an empty shard")
    state = init if init is not None else ModelState.zeros(cfg.model.num_params)
    eval_set = test if test is not None else train
    cursor = BatchCursor(cfg.master_seed)
    cost = cfg.round_bytes
    result = ExperimentResult([], STOP_ROUNDS, state)
    cumulative = 0
    for k in range(cfg.rounds):
        if cfg.byte_budget is not None and cumulative + cost > cfg.byte_budget:
            result.reason = STOP_BUDGET_FIRST if k == 0 else STOP_BUDGET
            break
        state, record = run_round(state, train, shards, cfg, k, cursor, cumulative)
        cumulative = record.cumulative_bytes
        reached = False
        if (k + 1) % cfg.eval_every == 0 or k == cfg.rounds - 1:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, acc = evaluate(cfg.model, state, eval_set)
            if not np.isfinite(loss):
                raise FloatingPointError(f"evaluation loss diverged at round {k}")
            result.evaluations.append((k, loss, acc))
            record = replace(record, test_accuracy=acc)
            reached = cfg.target_accuracy is not None and acc >= cfg.target_accuracy
        result.records.append(record)
        if on_round is not None:
            on_round(record)
        if reached:
            result.reason = STOP_TARGET
            break
    result.state = state
    log.info("stopped after %d rounds: %s", len(result.records), result.reason)
    return result
