"""Prefetch task queue, worker executor, and the transfer channel.

The predictor side publishes critical-expert load tasks into a FIFO
queue, stamping each with a readiness checkpoint (the simulated moment
the task is fully recorded). The worker pops tasks, honors readiness,
and performs batched transfers over a single CPU->GPU channel; demand
loads share that channel and serialize behind in-flight transfers,
which is exactly the bandwidth-contention mechanism deep prefetching
provokes.
"""

from __future__ import annotations

import enum
import queue as queue_mod
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .cache import ExpertCache, ExpertId, InsertKind
from .predictor import CriticalExpertSet


class TransferKind(str, enum.Enum):
    PREFETCH = "prefetch"
    ON_DEMAND = "on_demand"


@dataclass(frozen=True)
class TransferRecord:
    start: float
    end: float
    nbytes: int
    kind: TransferKind
    layer: int
    experts: tuple[int, ...]

    @property
    def duration(self) -> float:
        return self.end - self.start


class IoChannel:
    """Single PCIe-like link: transfers never overlap.

    Every transfer pays one launch overhead plus bytes/bandwidth and is
    appended to the log for CSV export and conservation checks.
    """

    def __init__(self, bandwidth: float, launch_overhead: float = 0.0):
        if bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")
        self.bandwidth = float(bandwidth)
        self.launch_overhead = float(launch_overhead)
        self.busy_until = 0.0
        self.log: list[TransferRecord] = []

    def transfer(
        self,
        nbytes: int,
        kind: TransferKind,
        now: float,
        ready_at: float = 0.0,
        layer: int = -1,
        experts: Sequence[int] = (),
    ) -> TransferRecord:
        start = max(now, ready_at, self.busy_until)
        end = start + self.launch_overhead + nbytes / self.bandwidth
        rec = TransferRecord(start, end, int(nbytes), kind, layer, tuple(experts))
        self.busy_until = end
        self.log.append(rec)
        return rec


@dataclass(frozen=True)
class PrefetchTask:
    """One layer's critical experts minus the already-cached ones."""

    experts: tuple[ExpertId, ...]
    ready_at: float
    issued_layer: int
    issue_token: int = -1


class PrefetchQueue:
    """FIFO shared by the predictor (producer) and the worker (consumer)."""

    def __init__(self):
        self._pending: deque[PrefetchTask] = deque()
        self.completed = 0
        self.aborted = 0

    def __len__(self) -> int:
        return len(self._pending)

    def push(self, task: PrefetchTask) -> None:
        self._pending.append(task)

    def peek(self) -> PrefetchTask:
        return self._pending[0]

    def pop(self) -> PrefetchTask:
        return self._pending.popleft()

    def pending_tasks(self) -> tuple[PrefetchTask, ...]:
        return tuple(self._pending)

    def abort_pending(self) -> int:
        """Drop whatever is still queued (end of inference); returns the count."""
        n = len(self._pending)
        self.aborted += n
        self._pending.clear()
        return n


def enqueue_critical(
    queue: PrefetchQueue,
    critical: CriticalExpertSet,
    cache: ExpertCache,
    now: float,
    issue_token: int = -1,
) -> PrefetchTask | None:
    """Publish a load task for the uncached critical experts of one layer.

    Cache-resident experts are filtered with non-touch probes; when all
    are resident no task is created. The caller enforces the cutoff guard
    (only layers at or below the cutoff reach this point).
    """
    remaining = tuple(
        ExpertId(critical.layer, e)
        for e in critical.experts
        if not cache.lookup(ExpertId(critical.layer, e), touch=False)
    )
    if not remaining:
        return None
    task = PrefetchTask(
        experts=remaining,
        ready_at=now,
        issued_layer=critical.layer,
        issue_token=issue_token,
    )
    queue.push(task)
    return task


@dataclass
class WorkerTransfer:
    """Outcome of one worker step: the task, its transfer span, and victims."""

    task: PrefetchTask
    start: float
    end: float
    loaded: tuple[ExpertId, ...]
    evicted: list[ExpertId] = field(default_factory=list)


def worker_step(
    queue: PrefetchQueue,
    cache: ExpertCache,
    channel: IoChannel,
    expert_size: int,
    now: float = 0.0,
    batched: bool = True,
    strict_replay: bool = False,
    on_complete: Callable[[float, tuple[ExpertId, ...]], None] | None = None,
) -> WorkerTransfer | None:
    """Execute the head task: wait for readiness, transfer, install.

    Residency is re-checked at pop time and already-cached experts are
    skipped; a task whose experts all became resident degenerates to a
    zero-byte transfer that still pays one launch overhead
    (``strict_replay`` disables the re-check, replaying tasks exactly as
    enqueued). Batched mode moves the whole task in one
    launch; unbatched pays one launch per expert.

    ``on_complete`` defers the cache installation to the caller's event
    loop (invoked with the transfer end time); by default the batch is
    installed immediately, which is equivalent whenever no other event
    falls inside the transfer interval.
    """
    if not len(queue):
        return None
    task = queue.pop()
    if strict_replay:
        loaded = task.experts
    else:
        loaded = tuple(e for e in task.experts if not cache.lookup(e, touch=False))

    if batched or len(loaded) <= 1:
        rec = channel.transfer(
            len(loaded) * expert_size,
            TransferKind.PREFETCH,
            now=now,
            ready_at=task.ready_at,
            layer=task.issued_layer,
            experts=tuple(e.expert for e in loaded),
        )
        start, end = rec.start, rec.end
    else:
        start = None
        end = now
        for eid in loaded:
            rec = channel.transfer(
                expert_size,
                TransferKind.PREFETCH,
                now=now,
                ready_at=task.ready_at,
                layer=task.issued_layer,
                experts=(eid.expert,),
            )
            start = rec.start if start is None else start
            end = rec.end
    queue.completed += 1

    result = WorkerTransfer(task=task, start=start, end=end, loaded=loaded)
    if loaded:
        if on_complete is not None:
            on_complete(end, loaded)
        else:
            result.evicted = cache.insert_batch(loaded, InsertKind.PREFETCH)
    return result


def peek_next_start(queue: PrefetchQueue, channel: IoChannel) -> float | None:
    """When the head task's transfer would begin, or None if queue is empty."""
    if not len(queue):
        return None
    return max(queue.peek().ready_at, channel.busy_until)


@dataclass
class VanillaPrefetchResult:
    """Per-expert blocking prefetch: the next layer may not start earlier."""

    transfers: list[TransferRecord]
    blocking_until: float


def vanilla_prefetch_step(
    critical: CriticalExpertSet,
    cache: ExpertCache,
    channel: IoChannel,
    expert_size: int,
    compute_start: float,
    compute_end: float,
) -> VanillaPrefetchResult:
    """Layer-synchronized prefetch: per-expert transfers, blocking handoff.

    Transfers overlap the issuing layer's computation but the subsequent
    layer must wait for them, so any load time beyond the compute window
    becomes stall. No batching: each expert pays its own launch overhead.
    """
    missing = [
        ExpertId(critical.layer, e)
        for e in critical.experts
        if not cache.lookup(ExpertId(critical.layer, e), touch=False)
    ]
    transfers = []
    end = compute_end
    for eid in missing:
        rec = channel.transfer(
            expert_size,
            TransferKind.PREFETCH,
            now=compute_start,
            layer=eid.layer,
            experts=(eid.expert,),
        )
        cache.insert_batch([eid], InsertKind.PREFETCH)
        transfers.append(rec)
        end = rec.end
    return VanillaPrefetchResult(transfers=transfers, blocking_until=max(compute_end, end))


def on_demand_load(
    ids: Sequence[ExpertId],
    cache: ExpertCache,
    channel: IoChannel,
    expert_size: int,
    now: float,
) -> float:
    """Load the given experts immediately; returns the completion time.

    Consecutive demand misses of one layer are coalesced into a single
    batch (one launch overhead). Resident ids are skipped; with nothing
    to move the call returns ``now`` without touching the channel. The
    transfer serializes behind whatever already occupies the channel.
    """
    missing = [eid for eid in ids if not cache.lookup(eid, touch=False)]
    if not missing:
        return now
    rec = channel.transfer(
        len(missing) * expert_size,
        TransferKind.ON_DEMAND,
        now=now,
        layer=missing[0].layer,
        experts=tuple(e.expert for e in missing),
    )
    cache.insert_batch(missing, InsertKind.DEMAND)
    return rec.end


# ---------------------------------------------------------------------------
# live mode
# ---------------------------------------------------------------------------


@dataclass
class LiveResult:
    completion_order: list[str]
    device_pool: dict[str, bytes]
    violations: list[str]


def run_live_transfer(
    payloads: dict[str, bytes],
    bandwidth: float = 64e6,
    publish_delay: float = 0.0005,
) -> LiveResult:
    """Run the producer/consumer protocol on real threads.

    The producer publishes each payload into a host pool, sets its
    readiness checkpoint, then enqueues the task; the consumer pops
    tasks FIFO, waits on the checkpoint, and copies bytes into a device
    pool through a sleep-throttled copier. Returns the completion order
    and any invariant violations observed (a task consumed before its
    checkpoint, or out of FIFO order).
    """
    task_queue: queue_mod.Queue = queue_mod.Queue()
    host_pool: dict[str, bytes] = {}
    device_pool: dict[str, bytes] = {}
    violations: list[str] = []
    completion_order: list[str] = []
    names = list(payloads)

    def producer():
        for name in names:
            host_pool[name] = payloads[name]
            checkpoint = threading.Event()
            if publish_delay:
                time.sleep(publish_delay)
            checkpoint.set()
            task_queue.put((name, checkpoint))
        task_queue.put(None)

    def consumer():
        while True:
            item = task_queue.get()
            if item is None:
                break
            name, checkpoint = item
            if not checkpoint.wait(timeout=5.0):
                violations.append(f"checkpoint never set for {name}")
                continue
            if name not in host_pool:
                violations.append(f"{name} consumed before publication")
                continue
            data = host_pool[name]
            time.sleep(len(data) / bandwidth)
            device_pool[name] = data
            completion_order.append(name)

    threads = [threading.Thread(target=producer), threading.Thread(target=consumer)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=30.0)
    if completion_order != names:
        violations.append(f"completion order {completion_order} != enqueue order {names}")
    return LiveResult(completion_order, device_pool, violations)
