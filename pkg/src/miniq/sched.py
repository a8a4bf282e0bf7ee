"""Cluster and queue state: FIFO scheduling with EASY backfill.

The scheduler owns a modeled node inventory and the job lifecycle state
machine.  Placement is first-fit in node configuration order with no slot
aggregation across nodes.  When the head of the queue cannot start, a single
shadow reservation is computed for it (the earliest instant it is guaranteed
startable, assuming running jobs use their full walltime) and later queued
jobs may start early only if they cannot disturb that reservation.

All operations take an explicit ``now`` so time is injected by the caller;
state mutation is meant to be serialized by a single writer.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .errors import InvalidTransition, NoSuchJob, Unsatisfiable
from .jobspec import JobSpec, ResourceRequest

# A placed request: node id -> slots bound on that node.
Allocation = dict[str, int]


class JobStatus(enum.Enum):
    PENDING = "PD"
    RUNNING = "R"
    COMPLETED = "CD"
    FAILED = "F"
    TIMED_OUT = "TO"
    CANCELLED = "CA"

    @property
    def code(self) -> str:
        return self.value


TERMINAL_STATES = frozenset(
    {JobStatus.COMPLETED, JobStatus.FAILED, JobStatus.TIMED_OUT, JobStatus.CANCELLED}
)

_LEGAL_TRANSITIONS = {
    JobStatus.PENDING: frozenset({JobStatus.RUNNING, JobStatus.CANCELLED}),
    JobStatus.RUNNING: frozenset(
        {JobStatus.COMPLETED, JobStatus.FAILED, JobStatus.TIMED_OUT, JobStatus.CANCELLED}
    ),
}

_CODE_TO_STATUS = {status.code: status for status in JobStatus}


def status_from_code(code: str) -> JobStatus:
    try:
        return _CODE_TO_STATUS[code]
    except KeyError:
        raise ValueError(f"unknown state code {code!r}") from None


@dataclass
class Node:
    id: str
    slots_total: int
    features: frozenset[str] = frozenset()
    slots_free: int = -1  # -1 means "all free"

    def __post_init__(self):
        if self.slots_total < 1:
            raise ValueError(f"node {self.id} must have at least one slot")
        if self.slots_free < 0:
            self.slots_free = self.slots_total


@dataclass(frozen=True)
class Outcome:
    """What ended (or tried to end) a job's run."""

    kind: str  # exit | timeout | cancel | daemon_failure
    exit_code: int | None = None
    reason: str | None = None

    @classmethod
    def exit(cls, code: int) -> "Outcome":
        return cls(kind="exit", exit_code=code)

    @classmethod
    def timeout(cls) -> "Outcome":
        return cls(kind="timeout")

    @classmethod
    def cancel(cls) -> "Outcome":
        return cls(kind="cancel")

    @classmethod
    def daemon_failure(cls, reason: str) -> "Outcome":
        return cls(kind="daemon_failure", reason=reason)


_OUTCOME_TO_STATUS = {
    "exit": JobStatus.COMPLETED,
    "timeout": JobStatus.TIMED_OUT,
    "cancel": JobStatus.CANCELLED,
    "daemon_failure": JobStatus.FAILED,
}


@dataclass
class JobRecord:
    id: int
    spec: JobSpec
    submit_dir: str
    state: JobStatus = JobStatus.PENDING
    submit_time: float = 0.0
    start_time: float | None = None
    end_time: float | None = None
    allocation: Allocation | None = None
    exit_code: int | None = None
    reason: str | None = None


@dataclass(frozen=True)
class StartEvent:
    job_id: int
    allocation: Allocation


@dataclass(frozen=True)
class StatusRow:
    id: int
    name: str
    state: str
    nodes: int
    slots_per_node: int
    elapsed_s: int | None
    limit_s: int

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "state": self.state,
            "nodes": self.nodes,
            "slots_per_node": self.slots_per_node,
            "elapsed_s": self.elapsed_s,
            "limit_s": self.limit_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StatusRow":
        return cls(
            id=d["id"],
            name=d["name"],
            state=d["state"],
            nodes=d["nodes"],
            slots_per_node=d["slots_per_node"],
            elapsed_s=d["elapsed_s"],
            limit_s=d["limit_s"],
        )


def first_fit(request: ResourceRequest, nodes: list[Node]) -> Allocation | None:
    """Pick the first ``request.nodes`` nodes that each hold a full slot group.

    Scans in configuration order; a node qualifies if it has at least
    ``slots_per_node`` free slots and carries every requested feature.  Slots
    are never aggregated across nodes.  Returns None when no placement exists.
    """
    needed = request.nodes
    slots = request.slots_per_node
    features = request.features
    chosen: Allocation = {}
    for node in nodes:
        if node.slots_free >= slots and features <= node.features:
            chosen[node.id] = slots
            if len(chosen) == needed:
                return chosen
    return None


def _fits_hypothetical(
    request: ResourceRequest, nodes: list[Node], free: dict[str, int]
) -> Allocation | None:
    """first_fit against an alternative free-slot map (same scan order)."""
    needed = request.nodes
    slots = request.slots_per_node
    features = request.features
    chosen: Allocation = {}
    for node in nodes:
        if free[node.id] >= slots and features <= node.features:
            chosen[node.id] = slots
            if len(chosen) == needed:
                return chosen
    return None


def shadow_time(head_request: ResourceRequest, state: "ClusterState") -> tuple[float, frozenset[str]]:
    """Earliest instant the head request is guaranteed startable, plus the
    nodes its reservation would use.

    Assumes every running job releases its slots exactly at
    start_time + walltime.  Evaluated at the current clock first (degenerate
    case: the head already fits), then at each release instant in order.
    """
    free = {node.id: node.slots_free for node in state.nodes}
    alloc = _fits_hypothetical(head_request, state.nodes, free)
    if alloc is not None:
        return state.clock, frozenset(alloc)

    releases: list[tuple[float, Allocation]] = []
    for rec in state.jobs.values():
        if rec.state is JobStatus.RUNNING:
            releases.append((rec.start_time + rec.spec.walltime_s, rec.allocation))
    releases.sort(key=lambda item: item[0])

    # Apply every release sharing an instant before probing: the reservation
    # must reflect the full state at that instant, not a mid-instant view.
    i = 0
    while i < len(releases):
        when = releases[i][0]
        while i < len(releases) and releases[i][0] == when:
            for node_id, slots in releases[i][1].items():
                free[node_id] += slots
            i += 1
        alloc = _fits_hypothetical(head_request, state.nodes, free)
        if alloc is not None:
            return when, frozenset(alloc)
    raise Unsatisfiable("head request cannot fit even on an idle cluster")


class ClusterState:
    """Node inventory, FIFO queue and job ledger; single-writer."""

    def __init__(self, nodes: list[Node], clock_start: float = 0.0):
        if not nodes:
            raise ValueError("cluster needs at least one node")
        self.nodes = nodes
        self.queue: list[int] = []
        self.jobs: dict[int, JobRecord] = {}
        self.clock = clock_start
        self._next_id = 1
        self._by_id = {node.id: node for node in nodes}

    # -- submission -------------------------------------------------- #

    def satisfiable(self, request: ResourceRequest) -> bool:
        eligible = sum(
            1
            for node in self.nodes
            if node.slots_total >= request.slots_per_node and request.features <= node.features
        )
        return eligible >= request.nodes

    def submit(self, spec: JobSpec, submit_dir: str, now: float) -> int:
        """Append a new Pending job; ids are strictly increasing from 1.

        Requests that exceed what the cluster could ever provide are rejected
        here rather than pending forever.
        """
        if not self.satisfiable(spec.resources):
            raise Unsatisfiable(
                f"request {spec.resources.nodes}x{spec.resources.slots_per_node}"
                f"{' with features ' + ','.join(sorted(spec.resources.features)) if spec.resources.features else ''}"
                " exceeds cluster capacity"
            )
        job_id = self._next_id
        self._next_id += 1
        self.jobs[job_id] = JobRecord(
            id=job_id, spec=spec, submit_dir=submit_dir, submit_time=now
        )
        self.queue.append(job_id)
        return job_id

    # -- scheduling pass ---------------------------------------------- #

    def tick(self, now: float, *, backfill: bool = True) -> list[StartEvent]:
        """One scheduling pass at instant ``now``.

        Starts head jobs while they fit; when the head is blocked, computes
        its shadow reservation and backfills later jobs that either finish by
        the shadow time or avoid the reserved nodes entirely.  One pass per
        tick, strict queue order.
        """
        if now < self.clock:
            raise ValueError(f"clock went backwards: {now} < {self.clock}")
        self.clock = now
        events: list[StartEvent] = []

        while self.queue:
            head = self.jobs[self.queue[0]]
            allocation = first_fit(head.spec.resources, self.nodes)
            if allocation is None:
                break
            events.append(self._start(head, allocation, now))

        if backfill and len(self.queue) > 1:
            head = self.jobs[self.queue[0]]
            shadow, reserved = shadow_time(head.spec.resources, self)
            for job_id in self.queue[1:]:
                rec = self.jobs[job_id]
                allocation = first_fit(rec.spec.resources, self.nodes)
                if allocation is None:
                    continue
                ends_in_time = now + rec.spec.walltime_s <= shadow
                if ends_in_time or reserved.isdisjoint(allocation):
                    events.append(self._start(rec, allocation, now))
        return events

    def _start(self, rec: JobRecord, allocation: Allocation, now: float) -> StartEvent:
        for node_id, slots in allocation.items():
            self._by_id[node_id].slots_free -= slots
        rec.state = JobStatus.RUNNING
        rec.start_time = now
        rec.allocation = allocation
        self.queue.remove(rec.id)
        return StartEvent(job_id=rec.id, allocation=allocation)

    # -- lifecycle ----------------------------------------------------- #

    def transition(self, job_id: int, outcome: Outcome, now: float) -> JobRecord:
        """Apply a lifecycle outcome; frees the allocation when leaving Running.

        Illegal transitions raise InvalidTransition and leave state unchanged.
        """
        rec = self.jobs.get(job_id)
        if rec is None:
            raise NoSuchJob(f"no such job {job_id}")
        target = _OUTCOME_TO_STATUS[outcome.kind]
        legal = _LEGAL_TRANSITIONS.get(rec.state, frozenset())
        if target not in legal:
            raise InvalidTransition(
                f"job {job_id}: {rec.state.name} does not accept {outcome.kind}"
            )
        if rec.state is JobStatus.RUNNING:
            for node_id, slots in rec.allocation.items():
                self._by_id[node_id].slots_free += slots
        else:  # leaving PENDING
            self.queue.remove(job_id)
        rec.state = target
        rec.end_time = now
        rec.exit_code = outcome.exit_code
        rec.reason = outcome.reason
        return rec

    # -- reporting ------------------------------------------------------ #

    def snapshot(
        self,
        now: float,
        *,
        states: set[JobStatus] | None = None,
        job_id: int | None = None,
    ) -> list[StatusRow]:
        """Status rows ascending by id, optionally filtered by state or id."""
        rows: list[StatusRow] = []
        for jid in sorted(self.jobs):
            rec = self.jobs[jid]
            if job_id is not None and jid != job_id:
                continue
            if states is not None and rec.state not in states:
                continue
            if rec.state is JobStatus.RUNNING:
                elapsed = int(now - rec.start_time)
            elif rec.start_time is not None and rec.end_time is not None:
                elapsed = int(rec.end_time - rec.start_time)
            else:
                elapsed = None
            rows.append(
                StatusRow(
                    id=jid,
                    name=rec.spec.name,
                    state=rec.state.code,
                    nodes=rec.spec.resources.nodes,
                    slots_per_node=rec.spec.resources.slots_per_node,
                    elapsed_s=elapsed,
                    limit_s=rec.spec.walltime_s,
                )
            )
        return rows

    # -- invariants ------------------------------------------------------ #

    def assert_conservation(self) -> None:
        """slots_total - slots_free on each node equals the slots bound to it
        by Running jobs; queue holds exactly the Pending ids in ascending order."""
        bound: dict[str, int] = {node.id: 0 for node in self.nodes}
        for rec in self.jobs.values():
            if rec.state is JobStatus.RUNNING:
                for node_id, slots in rec.allocation.items():
                    bound[node_id] += slots
        for node in self.nodes:
            used = node.slots_total - node.slots_free
            if used != bound[node.id]:
                raise AssertionError(
                    f"node {node.id}: {used} slots used but {bound[node.id]} bound"
                )
            if node.slots_free < 0 or node.slots_free > node.slots_total:
                raise AssertionError(f"node {node.id}: slots_free {node.slots_free} out of range")
        pending = [jid for jid in sorted(self.jobs) if self.jobs[jid].state is JobStatus.PENDING]
        if self.queue != pending:
            raise AssertionError(f"queue {self.queue} != pending ids {pending}")
