"""Experiment harnesses (global, local, centralized) and result tables."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .agent import Agent
from .codec import checksum
from .data import AgentDataset
from .errors import PlanValidationError, UsageError
from .metrics import MetricsRecord
from .network import (InProcessTransport, RoundLog, RoundLogEntry, build_topology,
                      derive_weights, run_training)
from .nn import ModelArchitecture, SensorWindow, stack_windows
from .seeds import derive_seed

log = logging.getLogger(__name__)

MODES = ("collab", "isolated", "centralized")
SCOPES = ("global", "local")
RESULT_COLUMNS = ("experiment_id", "dataset", "mode", "scope", "agent_id", "epoch",
                  "macro_f1", "mean_loss")


@dataclass
class ExperimentPlan:
    """Everything one experiment run needs, already loaded and windowed.

    For ``scope="global"`` agents train on ``datasets[i].train`` and are all
    scored on ``global_test``; for ``scope="local"`` each agent is scored on
    its own ``datasets[i].test``.
    """
    datasets: list[AgentDataset]
    arch: ModelArchitecture
    scope: str = "global"
    mode: str = "collab"
    global_test: list[SensorWindow] = field(default_factory=list)
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    topology: str = "full"
    topology_degree: int = 2
    include_self: bool = True
    standardize: bool = True
    reset_optimizer: bool = False
    adam: dict = field(default_factory=dict)
    workers: int = 1
    wire_transport: bool = False
    dataset_name: str = "synthetic"
    experiment_id: str = ""

    def validate(self) -> None:
        if self.scope not in SCOPES:
            raise PlanValidationError(f"scope must be one of {SCOPES}")
        if self.mode not in MODES:
            raise PlanValidationError(f"mode must be one of {MODES}")
        if not self.datasets:
            raise PlanValidationError("plan has no agents")
        if self.epochs < 1 or self.batch_size < 1:
            raise PlanValidationError("epochs and batch_size must be >= 1")
        maps = {tuple(sorted(d.class_map.items())) for d in self.datasets}
        if len(maps) != 1:
            raise PlanValidationError("agents disagree on the class map")
        if [d.agent_id for d in self.datasets] != list(range(len(self.datasets))):
            raise PlanValidationError("agent ids must be 0..n-1 in order")
        if self.scope == "global":
            if not self.global_test:
                raise PlanValidationError("global plan has no held-out test windows")
            present = {w.label for w in self.global_test}
            missing = sorted(set(range(self.arch.num_classes)) - present)
            if missing:
                inverse = {c: a for a, c in self.datasets[0].class_map.items()}
                raise PlanValidationError(
                    "held-out test subjects lack activities "
                    + ", ".join(str(inverse.get(c, c)) for c in missing))
            held_out = {w.subject for w in self.global_test}
            leaked = {w.subject for d in self.datasets for w in d.train} & held_out
            if leaked:
                raise PlanValidationError(
                    f"held-out subjects {sorted(leaked)} also appear in training data")


@dataclass
class RunResult:
    history: list[MetricsRecord]
    round_log: RoundLog
    agents: list[Agent]


def build_agents(plan: ExperimentPlan) -> list[Agent]:
    return [Agent(d.agent_id, plan.arch, d,
                  init_seed=derive_seed(plan.seed, "init", d.agent_id),
                  shuffle_seed=derive_seed(plan.seed, "shuffle", d.agent_id),
                  adam=plan.adam, standardize=plan.standardize,
                  reset_optimizer_on_set=plan.reset_optimizer)
            for d in plan.datasets]


def _global_hook(plan: ExperimentPlan):
    test = stack_windows(plan.global_test)

    def hook(agent: Agent, epoch: int) -> MetricsRecord:
        return agent.evaluate(test, epoch)
    return hook


def _local_hook():
    warned = set()

    def hook(agent: Agent, epoch: int) -> MetricsRecord | None:
        if not agent.dataset.test:
            if agent.agent_id not in warned:
                log.warning("agent %d has no local test windows; excluded", agent.agent_id)
                warned.add(agent.agent_id)
            return None
        return agent.evaluate(agent.dataset.test_arrays, epoch)
    return hook


def _run_decentralized(plan: ExperimentPlan, collaborate: bool) -> RunResult:
    plan.validate()
    agents = build_agents(plan)
    topology = build_topology(len(agents), plan.topology, plan.topology_degree,
                              derive_seed(plan.seed, "topology"))
    weights = derive_weights(topology, [a.size_weight for a in agents], plan.include_self)
    hook = _global_hook(plan) if plan.scope == "global" else _local_hook()
    round_log = RoundLog()
    transport = InProcessTransport(plan.arch if plan.wire_transport else None)
    history = run_training(agents, topology, weights, plan.epochs, plan.batch_size, [hook],
                           collaborate=collaborate, workers=plan.workers,
                           transport=transport, round_log=round_log)
    return RunResult(history, round_log, agents)


def run_global_generalization(plan: ExperimentPlan) -> RunResult:
    """Train the network and score every agent on the held-out subjects each epoch."""
    if plan.scope != "global":
        raise UsageError("plan scope is not 'global'")
    return _run_decentralized(plan, collaborate=plan.mode == "collab")


def run_local_generalization(plan: ExperimentPlan) -> RunResult:
    """Train the network and score every agent on its own test partition each epoch."""
    if plan.scope != "local":
        raise UsageError("plan scope is not 'local'")
    return _run_decentralized(plan, collaborate=plan.mode == "collab")


def batch_budget(plan: ExperimentPlan) -> tuple[int, int]:
    """(batches per network epoch, total batches) of the decentralized run."""
    per_epoch = sum(-(-d.size_weight // plan.batch_size) for d in plan.datasets)
    return per_epoch, per_epoch * plan.epochs


def run_centralized_baseline(plan: ExperimentPlan) -> RunResult:
    """One model trained on the union of all agents' training windows.

    It runs exactly as many batches as the whole decentralized network would,
    and is evaluated after every network epoch's worth of batches. It starts
    from agent 0's initialization and shuffle seed.
    """
    plan.validate()
    first = plan.datasets[0]
    union = [w for d in plan.datasets for w in d.train]
    if not union:
        raise UsageError("no training windows")
    pooled = AgentDataset(first.agent_id, union, [], dict(first.class_map), "centralized")
    agent = Agent(first.agent_id, plan.arch, pooled,
                  init_seed=derive_seed(plan.seed, "init", first.agent_id),
                  shuffle_seed=derive_seed(plan.seed, "shuffle", first.agent_id),
                  adam=plan.adam, standardize=plan.standardize,
                  reset_optimizer_on_set=plan.reset_optimizer)
    per_epoch, total = batch_budget(plan)
    if plan.scope == "global":
        targets = [(first.agent_id, stack_windows(plan.global_test))]
    else:
        targets = [(d.agent_id, d.test_arrays) for d in plan.datasets if d.test]
    round_log = RoundLog()
    history: list[MetricsRecord] = []
    for r in range(total):
        pre = checksum(agent.get_params())
        loss = agent.train_one_batch(plan.batch_size)
        round_log.append(RoundLogEntry(r, agent.agent_id, pre, checksum(agent.get_params()),
                                       loss, False))
        if (r + 1) % per_epoch == 0:
            epoch = (r + 1) // per_epoch
            for agent_id, arrays in targets:
                history.append(replace(agent.evaluate(arrays, epoch), agent_id=agent_id))
    history.sort(key=lambda m: (m.agent_id, m.epoch))
    return RunResult(history, round_log, [agent])


def run_experiment(plan: ExperimentPlan) -> RunResult:
    if plan.mode == "centralized":
        return run_centralized_baseline(plan)
    if plan.scope == "global":
        return run_global_generalization(plan)
    return run_local_generalization(plan)


# ---------------------------------------------------------------- tables


def results_csv(history: Sequence[MetricsRecord], experiment_id: str, dataset: str,
                mode: str, scope: str) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for m in history:
        writer.writerow([experiment_id, dataset, mode, scope, m.agent_id, m.epoch,
                         repr(float(m.macro_f1)), repr(float(m.mean_loss))])
    return buf.getvalue()


@dataclass(frozen=True)
class Summary:
    epochs: list[int]
    average_f1: list[float]        # unweighted mean over agents, per epoch
    final: dict[int, float]        # agent -> macro-F1 at its last recorded epoch

    @property
    def final_average(self) -> float:
        return self.average_f1[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "average_macro_f1"])
        for e, f in zip(self.epochs, self.average_f1):
            writer.writerow([e, repr(f)])
        return buf.getvalue()


def summarize(history: Sequence[MetricsRecord]) -> Summary:
    """Network-average macro-F1 per epoch and each agent's final score."""
    if not history:
        raise UsageError("empty history")
    by_epoch: dict[int, list[float]] = {}
    final: dict[int, tuple[int, float]] = {}
    for m in history:
        by_epoch.setdefault(m.epoch, []).append(m.macro_f1)
        if m.agent_id not in final or m.epoch > final[m.agent_id][0]:
            final[m.agent_id] = (m.epoch, m.macro_f1)
    epochs = sorted(by_epoch)
    return Summary(epochs, [float(np.mean(by_epoch[e])) for e in epochs],
                   {a: f for a, (_, f) in sorted(final.items())})
