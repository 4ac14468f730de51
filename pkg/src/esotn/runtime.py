"""Coordinator/worker execution fabric for lock-step training.

The coordinator doubles as worker 0: it evaluates its own mutation slice,
gathers the other workers' returns, computes the parameter update, and
broadcasts the delta. Workers re-derive their perturbations from the shared
seed scheme, so only (index, return) pairs and the update vector ever cross
the wire. Two transports implement the identical message contract: queue
pairs between threads (in-process) and framed sockets between processes.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .es import (
    ESConfig,
    Evaluator,
    IterationStats,
    MutationRecord,
    ProtocolError,
    evaluate_assignment,
    mutation_seed_sign,
    resolve_failures,
    shape_fitness,
    compute_update,
)
from .policy import ParamManifest, PolicyParams
from .wire import (
    IterationBegin,
    Message,
    ReturnsReport,
    Shutdown,
    SocketConnection,
    UpdateBroadcast,
    WireError,
    WorkerAssignment,
)

log = logging.getLogger(__name__)

DEFAULT_ITER_TIMEOUT = 300.0


class ConfigurationError(ValueError):
    """Invalid worker/mutation layout."""


class WorkerTimeoutError(RuntimeError):
    """A worker failed to report within the iteration deadline."""


def partition_mutations(k: int, n: int, mirrored: bool = False) -> list[WorkerAssignment]:
    """Balanced contiguous partition of mutation indices 0..k-1 over n workers.

    Mirrored runs partition whole pairs so every worker's slice is
    pair-aligned (sizes then differ by at most one pair).
    """
    if n < 1:
        raise ConfigurationError(f"worker count must be positive, got {n}")
    if n > k:
        raise ConfigurationError(f"{n} workers cannot share {k} mutations")
    unit = 2 if mirrored else 1
    slots = k // unit
    if mirrored:
        if k % 2:
            raise ConfigurationError(f"mirrored mutation count must be even, got {k}")
        if n > slots:
            raise ConfigurationError(f"{n} workers cannot share {slots} mirrored pairs")
    base, extra = divmod(slots, n)
    assignments = []
    start = 0
    for worker_id in range(n):
        size = (base + (1 if worker_id < extra else 0)) * unit
        assignments.append(WorkerAssignment(worker_id=worker_id, start=start, stop=start + size))
        start += size
    return assignments


@dataclass(frozen=True)
class TrainingSetup:
    """Everything a participant needs to run its side of the protocol."""

    es: ESConfig
    manifest: ParamManifest
    evaluator: Evaluator
    iter_timeout: float = DEFAULT_ITER_TIMEOUT


@dataclass
class RunStats:
    iterations: list[IterationStats] = field(default_factory=list)

    @property
    def final_mean_return(self) -> float:
        return self.iterations[-1].mean_return if self.iterations else float("nan")

    @property
    def total_wall_seconds(self) -> float:
        return sum(it.wall_seconds for it in self.iterations)


def wall_time_breakdown(stats: RunStats) -> tuple[float, float, float]:
    """(eval, update, comm) fractions of total accounted run time.

    Evaluation time per iteration is the max over workers, so it reflects
    the barrier the coordinator actually waits on; comm is the residual of
    the iteration wall time.
    """
    eval_total = sum(it.eval_seconds for it in stats.iterations)
    update_total = sum(it.update_seconds for it in stats.iterations)
    comm_total = sum(
        max(0.0, it.wall_seconds - it.eval_seconds - it.update_seconds)
        for it in stats.iterations
    )
    total = eval_total + update_total + comm_total
    if total <= 0.0:
        return 1.0, 0.0, 0.0
    return eval_total / total, update_total / total, comm_total / total


def run_coordinator(
    setup: TrainingSetup,
    theta0: PolicyParams,
    connections: Sequence,
    on_iteration: Callable[[IterationStats, PolicyParams], None] | None = None,
) -> tuple[PolicyParams, RunStats]:
    """Drive T lock-step iterations as worker 0 plus aggregator.

    ``connections`` carry workers 1..n-1 (empty for a single-worker run).
    Every iteration is a barrier: no update is computed until all returns
    for that iteration arrived.
    """
    es = setup.es
    n = len(connections) + 1
    assignments = partition_mutations(es.num_mutations, n, es.mirrored)
    theta = theta0
    version = 0
    stats = RunStats()
    try:
        for t in range(es.iterations):
            wall_start = time.perf_counter()
            for worker_id in range(1, n):
                connections[worker_id - 1].send(IterationBegin(t, version, assignments[worker_id]))

            own_start = time.perf_counter()
            records = evaluate_assignment(theta, es, t, assignments[0].indices, setup.evaluator)
            eval_times = [time.perf_counter() - own_start]

            deadline = time.monotonic() + setup.iter_timeout
            for worker_id in range(1, n):
                report = _await_report(connections[worker_id - 1], worker_id, t, deadline)
                _check_report(report, assignments[worker_id], t)
                eval_times.append(report.eval_seconds)
                for j, raw in report.returns:
                    seed, sign = mutation_seed_sign(es, t, j)
                    records.append(MutationRecord(t, j, seed, sign, raw))

            update_start = time.perf_counter()
            returns = resolve_failures(
                np.array([r.raw_return for r in sorted(records, key=lambda r: r.index)]), es
            )
            for record in records:
                record.raw_return = float(returns[record.index])
            shaped = shape_fitness(returns, es.shaping)
            delta = compute_update(records, shaped, es, setup.manifest)
            for conn in connections:
                conn.send(UpdateBroadcast(t, delta))
            theta = PolicyParams(manifest=setup.manifest, values=theta.values + delta)
            version += 1
            update_seconds = time.perf_counter() - update_start

            iteration = IterationStats(
                t=t,
                best_return=float(returns.max()),
                mean_return=float(returns.mean()),
                worst_return=float(returns.min()),
                eval_seconds=max(eval_times),
                update_seconds=update_seconds,
                wall_seconds=time.perf_counter() - wall_start,
                theta_l2_norm=float(np.linalg.norm(theta.values)),
            )
            stats.iterations.append(iteration)
            if on_iteration is not None:
                on_iteration(iteration, theta)
        for conn in connections:
            conn.send(Shutdown())
    finally:
        for conn in connections:
            conn.close()
    return theta, stats


def _await_report(connection, worker_id: int, t: int, deadline: float) -> ReturnsReport:
    remaining = deadline - time.monotonic()
    if remaining <= 0:
        raise WorkerTimeoutError(f"worker {worker_id} missed iteration {t} deadline")
    try:
        message = connection.recv(timeout=remaining)
    except TimeoutError:
        raise WorkerTimeoutError(
            f"worker {worker_id} sent no returns for iteration {t} "
            f"within the iteration timeout"
        ) from None
    except (WireError, OSError, EOFError) as exc:
        raise WorkerTimeoutError(f"worker {worker_id} died during iteration {t}: {exc}") from exc
    if not isinstance(message, ReturnsReport):
        raise ProtocolError(
            f"expected returns from worker {worker_id} for iteration {t}, "
            f"got {type(message).__name__}"
        )
    return message


def _check_report(report: ReturnsReport, assignment: WorkerAssignment, t: int) -> None:
    if report.t != t:
        raise ProtocolError(
            f"worker {report.worker_id} reported iteration {report.t} during iteration {t}"
        )
    indices = [j for j, _ in report.returns]
    if len(set(indices)) != len(indices):
        raise ProtocolError(f"worker {report.worker_id} reported duplicate mutation indices")
    if sorted(indices) != list(assignment.indices):
        raise ProtocolError(
            f"worker {report.worker_id} reported mutations {sorted(indices)}, "
            f"assigned {list(assignment.indices)}"
        )


def run_worker(setup: TrainingSetup, theta0: PolicyParams, connection) -> int:
    """Worker loop: evaluate assigned mutations, report, apply broadcast updates.

    Returns 0 on a clean shutdown. The lock-step protocol forbids version
    divergence, so a theta version mismatch is fatal.
    """
    es = setup.es
    theta = theta0
    version = 0
    while True:
        message = connection.recv(timeout=None)
        if isinstance(message, Shutdown):
            return 0
        if not isinstance(message, IterationBegin):
            raise ProtocolError(f"unexpected {type(message).__name__} while idle")
        if message.theta_version != version:
            raise ProtocolError(
                f"theta version mismatch: coordinator announced {message.theta_version}, "
                f"local is {version}"
            )
        t = message.t
        eval_start = time.perf_counter()
        records = evaluate_assignment(theta, es, t, message.assignment.indices, setup.evaluator)
        eval_seconds = time.perf_counter() - eval_start
        connection.send(
            ReturnsReport(
                t=t,
                worker_id=message.assignment.worker_id,
                returns=tuple((r.index, r.raw_return) for r in records),
                eval_seconds=eval_seconds,
            )
        )
        update = connection.recv(timeout=None)
        if not isinstance(update, UpdateBroadcast) or update.t != t:
            raise ProtocolError(f"expected update for iteration {t}, got {update!r}")
        theta = PolicyParams(manifest=setup.manifest, values=theta.values + update.delta)
        version += 1


class QueueConnection:
    """In-process bidirectional endpoint over a pair of queues."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue) -> None:
        self._inbox = inbox
        self._outbox = outbox
        self.sent_messages = 0

    @staticmethod
    def pair() -> tuple["QueueConnection", "QueueConnection"]:
        a_to_b: queue.Queue = queue.Queue()
        b_to_a: queue.Queue = queue.Queue()
        return QueueConnection(b_to_a, a_to_b), QueueConnection(a_to_b, b_to_a)

    def send(self, message: Message) -> None:
        self.sent_messages += 1
        self._outbox.put(message)

    def recv(self, timeout: float | None = None) -> Message:
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no message within timeout") from None

    def close(self) -> None:
        pass


def run_inproc(
    setup: TrainingSetup,
    theta0: PolicyParams,
    n: int,
    on_iteration: Callable[[IterationStats, PolicyParams], None] | None = None,
) -> tuple[PolicyParams, RunStats]:
    """Coordinator plus n-1 worker threads over queue connections."""
    if n == 1:
        return run_coordinator(setup, theta0, [], on_iteration)
    coordinator_ends: list[QueueConnection] = []
    threads: list[threading.Thread] = []
    worker_errors: list[BaseException] = []

    def worker_main(conn: QueueConnection) -> None:
        try:
            run_worker(setup, theta0, conn)
        except BaseException as exc:  # surfaced after join
            worker_errors.append(exc)

    for _ in range(n - 1):
        coord_end, worker_end = QueueConnection.pair()
        coordinator_ends.append(coord_end)
        thread = threading.Thread(target=worker_main, args=(worker_end,), daemon=True)
        thread.start()
        threads.append(thread)
    try:
        result = run_coordinator(setup, theta0, coordinator_ends, on_iteration)
    finally:
        for thread in threads:
            thread.join(timeout=10.0)
    if worker_errors:
        raise worker_errors[0]
    return result


def serve_workers(
    n: int,
    spawn: Callable[[str], object],
    bind_host: str = "127.0.0.1",
    bind_port: int = 0,
    accept_timeout: float = 60.0,
) -> tuple[list[SocketConnection], list, socket.socket]:
    """Listen, launch n-1 worker processes, and accept their connections.

    ``spawn`` receives the ``host:port`` endpoint and must start one worker
    (returning a process handle or None for externally managed workers).
    """
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((bind_host, bind_port))
    listener.listen(max(n - 1, 1))
    host, port = listener.getsockname()
    endpoint = f"{host}:{port}"
    processes = [spawn(endpoint) for _ in range(n - 1)]
    connections: list[SocketConnection] = []
    listener.settimeout(accept_timeout)
    try:
        for _ in range(n - 1):
            sock, _ = listener.accept()
            connections.append(SocketConnection(sock))
    except TimeoutError:
        for conn in connections:
            conn.close()
        raise WorkerTimeoutError(
            f"only {len(connections)} of {n - 1} workers connected within {accept_timeout}s"
        ) from None
    return connections, processes, listener


def run_proc(
    setup: TrainingSetup,
    theta0: PolicyParams,
    n: int,
    spawn: Callable[[str], object],
    on_iteration: Callable[[IterationStats, PolicyParams], None] | None = None,
    bind_host: str = "127.0.0.1",
    bind_port: int = 0,
) -> tuple[PolicyParams, RunStats]:
    """Coordinator plus n-1 worker processes over local sockets."""
    if n == 1:
        return run_coordinator(setup, theta0, [], on_iteration)
    connections, processes, listener = serve_workers(n, spawn, bind_host, bind_port)
    try:
        result = run_coordinator(setup, theta0, connections, on_iteration)
    finally:
        listener.close()
        for process in processes:
            if process is None:
                continue
            try:
                code = process.wait(timeout=30.0)
                if code != 0:
                    log.warning("worker process exited with status %s", code)
            except Exception:
                process.kill()
    return result


def connect_worker(endpoint: str, timeout: float = 60.0) -> SocketConnection:
    """Dial the coordinator at ``host:port``."""
    host, _, port = endpoint.rpartition(":")
    sock = socket.create_connection((host, int(port)), timeout=timeout)
    sock.settimeout(None)
    return SocketConnection(sock)
