"""Synchronous federated averaging: aggregation, rounds, and the run-to-target loop."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import (DivergenceError, LabeledDataset, ParamVector, TrainConfig,
                    evaluate_accuracy, local_train)

log = logging.getLogger(__name__)


class AggregationError(ValueError):
    pass


class ClientFailure(RuntimeError):
    def __init__(self, client_id: int, reason: str):
        super().__init__(f"client {client_id}: {reason}")
        self.client_id = client_id


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    n_k: int
    params: ParamVector
    local_metric: float = 0.0

    def __post_init__(self):
        if self.n_k < 1:
            raise AggregationError(f"client {self.client_id}: n_k must be >= 1")


@dataclass(frozen=True)
class GlobalModel:
    round: int
    params: ParamVector
    metric: float


@dataclass(frozen=True)
class RoundReport:
    round: int
    global_metric: float
    per_client_metrics: dict[int, float]
    reached_target: bool = False


@dataclass
class Client:
    """A client's shard plus the config template it trains with each round."""

    client_id: int
    data: LabeledDataset
    train_config: TrainConfig
    # best candidate seen so far, see select_best_local
    best: tuple[ParamVector, float] | None = field(default=None, repr=False)
    # key for the per-round shuffle seed; defaults to client_id
    seed_key: int | None = None

    @property
    def n_k(self) -> int:
        return len(self.data)

    def consider(self, params: ParamVector, metric: float) -> None:
        if self.best is None:
            self.best = (params, metric)
        else:
            self.best = select_best_local([self.best, (params, metric)])


def aggregate(updates: Sequence[ClientUpdate]) -> ParamVector:
    """Sample-count-weighted mean of client parameters.

    Updates are combined in ascending ``client_id`` order. The mean is taken as
    an offset from the first client's parameters, so identical inputs come back
    unchanged, and the result is clamped to the element-wise client range.
    """
    if not updates:
        raise AggregationError("no client updates to aggregate")
    ups = sorted(updates, key=lambda u: u.client_id)
    layout = ups[0].params.layout
    for u in ups:
        if u.params.layout != layout:
            raise AggregationError(f"client {u.client_id} sent a mismatched layout")
        if not np.all(np.isfinite(u.params.values)):
            raise AggregationError(f"client {u.client_id} sent non-finite values")
    n = sum(u.n_k for u in ups)
    ref = ups[0].params.values
    if len(ups) == 1:
        return ups[0].params
    offset = np.zeros_like(ref)
    for u in ups[1:]:
        offset += (u.n_k / n) * (u.params.values - ref)
    stacked = np.stack([u.params.values for u in ups])
    out = np.clip(ref + offset, stacked.min(axis=0), stacked.max(axis=0))
    return ParamVector(layout, out)


def aggregation_weights(n_ks: Sequence[int]) -> np.ndarray:
    n = sum(n_ks)
    return np.array([k / n for k in n_ks])


def round_seed(base_seed: int, client_id: int, round_index: int) -> int:
    """Shuffle seed for one client's local training in one round."""
    ss = np.random.SeedSequence([int(base_seed), int(client_id), int(round_index)])
    return int(ss.generate_state(1, np.uint64)[0])


def round_config(base: TrainConfig, client_id: int, round_index: int) -> TrainConfig:
    return TrainConfig(base.local_epochs, base.batch_size, base.learning_rate,
                       seed=round_seed(base.seed, client_id, round_index))


def client_update(client: Client, incoming: GlobalModel) -> ClientUpdate:
    """Local training for the round that follows ``incoming``."""
    client.consider(incoming.params, evaluate_accuracy(incoming.params, client.data))
    key = client.client_id if client.seed_key is None else client.seed_key
    cfg = round_config(client.train_config, key, incoming.round + 1)
    try:
        params, _ = local_train(incoming.params, client.data, cfg)
    except DivergenceError as exc:
        raise ClientFailure(client.client_id, str(exc)) from exc
    metric = evaluate_accuracy(params, client.data)
    client.consider(params, metric)
    return ClientUpdate(client.client_id, client.n_k, params, metric)


def run_round(incoming: GlobalModel, clients: Sequence[Client], eval_set: LabeledDataset,
              target_metric: float | None = None,
              workers: int = 1) -> tuple[GlobalModel, RoundReport]:
    if not clients:
        raise ValueError("a round needs at least one client")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids: {ids}")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            updates = list(pool.map(lambda c: client_update(c, incoming), clients))
    else:
        updates = [client_update(c, incoming) for c in sorted(clients, key=lambda c: c.client_id)]
    return finish_round(incoming, updates, eval_set, target_metric)


def finish_round(incoming: GlobalModel, updates: Sequence[ClientUpdate],
                 eval_set: LabeledDataset,
                 target_metric: float | None = None) -> tuple[GlobalModel, RoundReport]:
    """Server half of a round: aggregate, evaluate, report."""
    params = aggregate(updates)
    metric = evaluate_accuracy(params, eval_set)
    new = GlobalModel(incoming.round + 1, params, metric)
    reached = target_metric is not None and metric >= target_metric
    report = RoundReport(new.round, metric,
                         {u.client_id: u.local_metric for u in sorted(updates, key=lambda u: u.client_id)},
                         reached)
    return new, report


def select_best_local(candidates: Sequence[tuple[ParamVector, float]]) -> tuple[ParamVector, float]:
    """Highest-metric candidate; on ties the later candidate wins.

    Candidates are expected in chronological order.
    """
    if not candidates:
        raise ValueError("no candidates to choose from")
    best = candidates[0]
    for cand in candidates[1:]:
        if cand[1] >= best[1]:
            best = cand
    return best


def check_target(target_metric: float) -> None:
    if not (0 < target_metric <= 1) or math.isnan(target_metric):
        raise ValueError(f"target_metric must be in (0, 1], got {target_metric}")


@dataclass
class FedRun:
    initial: GlobalModel
    final: GlobalModel
    reports: list[RoundReport]
    target_metric: float

    @property
    def rounds(self) -> int:
        """Completed aggregation rounds (the initial broadcast is not counted)."""
        return self.final.round

    @property
    def reached_target(self) -> bool:
        return self.final.metric >= self.target_metric


def run_until_target(clients: Sequence[Client], eval_set: LabeledDataset, target_metric: float,
                     max_rounds: int, initial: ParamVector, workers: int = 1) -> FedRun:
    """Run rounds until the held-out metric reaches ``target_metric`` or the budget ends.

    The target is checked on the initial broadcast first, so a model that
    already meets it finishes after zero rounds.
    """
    check_target(target_metric)
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    g = GlobalModel(0, initial, evaluate_accuracy(initial, eval_set))
    start = g
    reports: list[RoundReport] = []
    while g.metric < target_metric and g.round < max_rounds:
        g, report = run_round(g, clients, eval_set, target_metric, workers)
        reports.append(report)
        log.debug("round %d metric %.4f", g.round, g.metric)
    for c in clients:
        c.consider(g.params, evaluate_accuracy(g.params, c.data))
    return FedRun(start, g, reports, target_metric)
