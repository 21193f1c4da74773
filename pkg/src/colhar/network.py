"""Agent network: topology, interaction weights, aggregation and round scheduling.

Rounds are bulk-synchronous. In round ``r`` every agent first aggregates the
snapshots its in-neighbours published at the end of round ``r - 1`` (round 0
skips this), then trains one batch, then publishes its parameters. Messages
published during a round are only delivered at the barrier that closes it, so
the outcome does not depend on how many workers execute the round.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .agent import Agent
from .codec import Message, checksum
from .errors import ArchitectureError, ConfigError, UsageError
from .metrics import MetricsRecord
from .nn import ModelArchitecture

log = logging.getLogger(__name__)

TOPOLOGIES = ("full", "ring", "random")


@dataclass(frozen=True)
class Topology:
    num_agents: int
    edges: frozenset[tuple[int, int]]  # (sender, receiver)

    def in_neighbors(self, receiver: int) -> list[int]:
        return sorted(s for s, r in self.edges if r == receiver)

    def out_neighbors(self, sender: int) -> list[int]:
        return sorted(r for s, r in self.edges if s == sender)


def build_topology(num_agents: int, kind: str = "full", degree: int = 2, seed: int = 0) -> Topology:
    """Directed communication graph over agents ``0..num_agents-1``.

    ``full``: every ordered pair. ``ring``: each agent linked both ways to its
    successor. ``random``: each agent links both ways to ``degree`` peers
    drawn with ``seed``.
    """
    if num_agents < 1:
        raise UsageError("num_agents must be >= 1")
    n = num_agents
    edges: set[tuple[int, int]] = set()
    if kind == "full":
        edges = {(i, j) for i in range(n) for j in range(n) if i != j}
    elif kind == "ring":
        if n > 1:
            for i in range(n):
                j = (i + 1) % n
                edges |= {(i, j), (j, i)}
    elif kind == "random":
        rng = np.random.default_rng(seed)
        k = min(degree, n - 1)
        for i in range(n):
            peers = rng.choice([j for j in range(n) if j != i], size=k, replace=False) if k else []
            for j in peers:
                edges |= {(i, int(j)), (int(j), i)}
    else:
        raise ConfigError(f"unknown topology {kind!r}; expected one of {', '.join(TOPOLOGIES)}")
    return Topology(n, frozenset((s, r) for s, r in edges if s != r))


@dataclass(frozen=True)
class InteractionWeights:
    """Per receiver, ``(sender, weight)`` pairs in ascending sender order."""
    by_receiver: dict[int, tuple[tuple[int, float], ...]]

    def vector(self, receiver: int) -> tuple[tuple[int, float], ...]:
        return self.by_receiver.get(receiver, ())

    def weight(self, receiver: int, sender: int) -> float:
        for s, w in self.vector(receiver):
            if s == sender:
                return w
        return 0.0

    @property
    def include_self(self) -> bool:
        return any(s == r for r, vec in self.by_receiver.items() for s, _ in vec)


def derive_weights(topology: Topology, dataset_sizes: Sequence[int],
                   include_self: bool = True) -> InteractionWeights:
    """Every sender is weighted by its training-set size, whoever receives."""
    if len(dataset_sizes) != topology.num_agents:
        raise UsageError("one dataset size per agent required")
    if any(s < 0 for s in dataset_sizes):
        raise UsageError("dataset sizes must be >= 0")
    out = {}
    for i in range(topology.num_agents):
        senders = topology.in_neighbors(i)
        if include_self:
            senders = sorted(senders + [i])
        vec = tuple((j, float(dataset_sizes[j])) for j in senders)
        if vec and not any(w > 0 for _, w in vec):
            log.info("agent %d has zero total incoming weight; it will not aggregate", i)
        out[i] = vec
    return InteractionWeights(out)


@dataclass(frozen=True)
class NeighborContribution:
    sender_id: int
    params: np.ndarray
    weight: float


class ZeroTotalWeight(UsageError):
    """All contributions carry zero weight; the receiver keeps its parameters."""


def aggregate(contributions: Sequence[NeighborContribution]) -> np.ndarray:
    """Weighted mean of the contributed parameter vectors.

    Weights are normalized first and the weighted vectors are summed in
    ascending ``sender_id`` order, which makes the result bitwise
    reproducible. A single contribution is returned unchanged.
    """
    if not contributions:
        raise ZeroTotalWeight("no contributions")
    items = sorted(contributions, key=lambda c: c.sender_id)
    length = np.asarray(items[0].params).shape
    for c in items:
        if np.asarray(c.params).shape != length:
            raise ArchitectureError("contributions have different parameter lengths")
        if not c.weight >= 0 or not math.isfinite(c.weight):
            raise UsageError(f"invalid weight {c.weight!r} from agent {c.sender_id}")
    total = math.fsum(c.weight for c in items)
    if total <= 0:
        raise ZeroTotalWeight("total contribution weight is zero")
    acc = None
    for c in items:
        if c.weight == 0:
            continue
        term = (c.weight / total) * np.asarray(c.params, dtype=np.float64)
        acc = term if acc is None else acc + term
    return acc


class InProcessTransport:
    """Reliable, ordered in-memory delivery with a round barrier.

    ``send`` queues a message; it becomes visible to ``collect`` only after
    ``deliver()``. With ``arch`` given, every message is encoded to bytes and
    decoded on delivery, exercising the wire format.
    """

    def __init__(self, arch: ModelArchitecture | None = None):
        self.arch = arch
        self._pending: list[tuple[int, object]] = []
        self._inbox: dict[int, deque] = defaultdict(deque)
        self.sent = 0

    def send(self, receiver: int, message: Message) -> None:
        payload = message.encode(self.arch) if self.arch is not None else message
        self._pending.append((receiver, payload))
        self.sent += 1

    def deliver(self) -> None:
        for receiver, payload in self._pending:
            self._inbox[receiver].append(payload)
        self._pending.clear()

    def collect(self, receiver: int) -> list[Message]:
        box = self._inbox[receiver]
        out = []
        while box:
            payload = box.popleft()
            out.append(Message.decode(payload, self.arch) if self.arch is not None else payload)
        return out


@dataclass(frozen=True)
class RoundLogEntry:
    round: int
    agent: int
    pre_checksum: str
    post_checksum: str
    loss: float | None
    aggregated: bool


@dataclass
class RoundLog:
    entries: list[RoundLogEntry] = field(default_factory=list)

    def append(self, entry: RoundLogEntry) -> None:
        self.entries.append(entry)

    def rows(self, round_index: int) -> list[RoundLogEntry]:
        return [e for e in self.entries if e.round == round_index]

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["round", "agent", "pre_checksum", "post_checksum", "loss"])
            for e in self.entries:
                writer.writerow([e.round, e.agent, e.pre_checksum, e.post_checksum,
                                 "" if e.loss is None else repr(e.loss)])


def _agent_step(agent: Agent, messages: list[Message], weights: InteractionWeights,
                batch_size: int, aggregate_now: bool):
    pre = checksum(agent.get_params())
    aggregated = False
    if aggregate_now:
        contributions = [NeighborContribution(m.sender_id, m.params, m.weight)
                         for m in messages if m.weight > 0]
        own = weights.weight(agent.agent_id, agent.agent_id)
        if own > 0:
            contributions.append(NeighborContribution(agent.agent_id, agent.get_params(), own))
        if contributions:
            try:
                agent.set_params(aggregate(contributions))
                aggregated = True
            except ZeroTotalWeight:
                log.info("agent %d skipped aggregation: zero total weight", agent.agent_id)
    loss = agent.train_one_batch(batch_size)
    return pre, aggregated, loss


def run_round(agents: Sequence[Agent], topology: Topology, weights: InteractionWeights,
              batch_size: int, round_index: int, transport: InProcessTransport,
              round_log: RoundLog | None = None, collaborate: bool = True,
              executor: ThreadPoolExecutor | None = None) -> list[float | None]:
    """One collect -> aggregate -> train -> publish cycle for every agent.

    Returns the per-agent batch losses (None for passive agents).
    """
    aggregate_now = collaborate and round_index > 0
    inboxes = [transport.collect(a.agent_id) for a in agents]
    jobs = list(zip(agents, inboxes))
    step = lambda job: _agent_step(job[0], job[1], weights, batch_size, aggregate_now)  # noqa: E731
    results = list(executor.map(step, jobs)) if executor is not None else [step(j) for j in jobs]

    # barrier: everyone has trained; publish snapshots for the next round
    losses = []
    for agent, (pre, aggregated, loss) in zip(agents, results):
        snapshot = agent.get_params()
        if collaborate:
            fp = agent.arch.fingerprint()
            for z in topology.out_neighbors(agent.agent_id):
                w = weights.weight(z, agent.agent_id)
                transport.send(z, Message(agent.agent_id, round_index, w, fp, snapshot))
        if round_log is not None:
            round_log.append(RoundLogEntry(round_index, agent.agent_id, pre,
                                           checksum(snapshot), loss, aggregated))
        losses.append(loss)
    transport.deliver()
    return losses


EvalHook = Callable[[Agent, int], "MetricsRecord | None"]


def run_training(agents: Sequence[Agent], topology: Topology, weights: InteractionWeights,
                 epochs: int, batch_size: int, eval_hooks: Iterable[EvalHook] = (),
                 collaborate: bool = True, workers: int = 1,
                 transport: InProcessTransport | None = None,
                 round_log: RoundLog | None = None) -> list[MetricsRecord]:
    """Run rounds until every active agent has completed ``epochs`` local epochs.

    Agents with fewer batches per epoch keep training into later epochs while
    the others finish. Hooks fire whenever an agent completes epoch
    ``1..epochs``. Passive agents are evaluated on the clock of the agent
    with the most batches per epoch. Returns records sorted by
    ``(agent_id, epoch)``.
    """
    if epochs < 1:
        raise UsageError("epochs must be >= 1")
    ids = [a.agent_id for a in agents]
    if ids != list(range(topology.num_agents)):
        raise UsageError("agents must be ordered with ids 0..n-1 matching the topology")
    active = [a for a in agents if not a.passive]
    if not active:
        raise UsageError("no agent has training data")
    hooks = list(eval_hooks)
    transport = transport or InProcessTransport()
    longest = max(a.batches_per_epoch(batch_size) for a in active)
    history: list[MetricsRecord] = []

    def fire(agent: Agent, epoch: int):
        for hook in hooks:
            rec = hook(agent, epoch)
            if rec is not None:
                history.append(rec)

    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        r = 0
        while min(a.epoch for a in active) < epochs:
            before = [a.epoch for a in agents]
            run_round(agents, topology, weights, batch_size, r, transport, round_log,
                      collaborate, executor)
            for agent, prev in zip(agents, before):
                if agent.passive:
                    if (r + 1) % longest == 0 and (r + 1) // longest <= epochs:
                        fire(agent, (r + 1) // longest)
                elif agent.epoch != prev and agent.epoch <= epochs:
                    fire(agent, agent.epoch)
            r += 1
    finally:
        if executor is not None:
            executor.shutdown()
    history.sort(key=lambda m: (m.agent_id, m.epoch))
    return history
