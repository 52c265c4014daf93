"""Experiment wiring shared by the CLI: datasets, clients, runs, CSV output."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .fedavg import Client, FedRun, GlobalModel, RoundReport, check_target, round_config, run_until_target
from .model import (LabeledDataset, ParamVector, TrainConfig, classifier_layout,
                    evaluate_accuracy, init_params, local_train)
from .partition import (DENTAL_CLASS_NAMES, DENTAL_CLASS_WEIGHTS, FEATURE_DIM, PartitionSpec,
                        Shard, make_partition, shard_stats, synth_dataset)

METRIC_LABEL = "target-metric (stand-in for target mAP)"
MODEL_NAME = "Federated - LogReg"

# sub-seed tags derived from the single experiment seed
_DATA, _EVAL, _PARTITION, _TRAIN, _INIT = range(1, 6)


def sub_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    clients: int = 5
    local_epochs: int = 5
    batch_size: int = 1
    learning_rate: float = 1e-4
    target_metric: float = 0.80
    max_rounds: int = 200
    partition: str = "iid"
    shards_per_client: int = 2
    dataset_size: int = 2000
    eval_size: int = 500
    num_classes: int = 4
    seed: int = 0
    workers: int = 1
    balanced: bool = False

    def __post_init__(self):
        check_target(self.target_metric)
        for name in ("clients", "local_epochs", "batch_size", "max_rounds", "dataset_size",
                     "eval_size", "num_classes", "shards_per_client", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name.replace('_', '-')} must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning-rate must be positive")
        if self.partition not in ("iid", "label_skew"):
            raise ValueError(f"unknown partition {self.partition!r}")
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.clients > self.dataset_size:
            raise ValueError("more clients than samples")
        if self.partition == "label_skew" and self.clients * self.shards_per_client > self.dataset_size:
            raise ValueError("clients x shards-per-client exceeds dataset size")

    @property
    def class_weights(self) -> tuple[float, ...]:
        if self.num_classes == len(DENTAL_CLASS_WEIGHTS) and not self.balanced:
            return DENTAL_CLASS_WEIGHTS
        return tuple([1.0 / self.num_classes] * self.num_classes)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.local_epochs, self.batch_size, self.learning_rate,
                           seed=sub_seed(self.seed, _TRAIN))


@dataclass
class Setup:
    config: ExperimentConfig
    train: LabeledDataset
    eval_set: LabeledDataset
    shards: list[Shard]
    initial: ParamVector

    def make_clients(self) -> list[Client]:
        cfg = self.config.train_config()
        return [Client(s.client_id, self.train.subset(s.indices), cfg) for s in self.shards]

    def make_client(self, client_id: int) -> Client:
        for c in self.make_clients():
            if c.client_id == client_id:
                return c
        raise ValueError(f"client id {client_id} not in 0..{len(self.shards) - 1}")


def build(config: ExperimentConfig) -> Setup:
    c = config
    train = synth_dataset(c.dataset_size, c.num_classes, c.class_weights, sub_seed(c.seed, _DATA),
                          exact=c.balanced)
    eval_set = synth_dataset(c.eval_size, c.num_classes, c.class_weights, sub_seed(c.seed, _EVAL),
                             exact=c.balanced)
    spec = PartitionSpec(c.partition, c.clients, c.shards_per_client, sub_seed(c.seed, _PARTITION))
    shards = make_partition(train, spec)
    initial = init_params(classifier_layout(FEATURE_DIM, c.num_classes), sub_seed(c.seed, _INIT))
    return Setup(config, train, eval_set, shards, initial)


def simulate(config: ExperimentConfig) -> FedRun:
    s = build(config)
    return run_until_target(s.make_clients(), s.eval_set, config.target_metric,
                            config.max_rounds, s.initial, workers=config.workers)


def centralized(config: ExperimentConfig) -> FedRun:
    """Plain SGD on the whole training set, one local_train call per round.

    Uses the seed schedule of client 0, so it reproduces a one-client
    federated run exactly.
    """
    s = build(config)
    base = config.train_config()
    g = GlobalModel(0, s.initial, evaluate_accuracy(s.initial, s.eval_set))
    start = g
    reports = []
    while g.metric < config.target_metric and g.round < config.max_rounds:
        params, _ = local_train(g.params, s.train, round_config(base, 0, g.round + 1))
        metric = evaluate_accuracy(params, s.eval_set)
        g = GlobalModel(g.round + 1, params, metric)
        reports.append(RoundReport(g.round, metric, {0: evaluate_accuracy(params, s.train)},
                                   metric >= config.target_metric))
    return FedRun(start, g, reports, config.target_metric)


def rounds_csv(run: FedRun) -> str:
    """round, global_metric, reached_target; row 0 is the initial broadcast."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "global_metric", "reached_target"])
    w.writerow([0, repr(run.initial.metric), str(run.initial.metric >= run.target_metric).lower()])
    for r in run.reports:
        w.writerow([r.round, repr(r.global_metric), str(r.reached_target).lower()])
    return buf.getvalue()


def plot_data(run: FedRun) -> str:
    lines = [f"0 {run.initial.metric!r}"] + [f"{r.round} {r.global_metric!r}" for r in run.reports]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SweepRow:
    model: str
    local_epochs: int
    rounds: int
    reached_target: bool
    partition: str


def sweep_e(config: ExperimentConfig, e_values: Sequence[int] = (1, 5, 10)) -> list[SweepRow]:
    if not e_values:
        raise ValueError("e_values must not be empty")
    rows = []
    for e in e_values:
        run = simulate(replace(config, local_epochs=int(e)))
        rows.append(SweepRow(MODEL_NAME, int(e), run.rounds, run.reached_target, config.partition))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "E", "rounds", "reached_target", "partition"])
    for r in rows:
        w.writerow([r.model, r.local_epochs, r.rounds, str(r.reached_target).lower(), r.partition])
    return buf.getvalue()


def partition_table(config: ExperimentConfig) -> tuple[list[str], list[list[int | str]]]:
    s = build(config)
    hist = shard_stats(s.train, s.shards)
    names = (list(DENTAL_CLASS_NAMES) if config.num_classes == len(DENTAL_CLASS_NAMES)
             else [f"class{c}" for c in range(config.num_classes)])
    header = ["client", *names, "n_k"]
    rows: list[list[int | str]] = [[s.shards[i].client_id, *map(int, hist[i]), int(hist[i].sum())]
                                   for i in range(len(s.shards))]
    rows.append(["total", *map(int, hist.sum(axis=0)), int(hist.sum())])
    return header, rows
