import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esotn.es import ProtocolError, toy_config, train_iteration
from esotn.policy import ParamManifest, PolicyParams
from esotn.runtime import (
    ConfigurationError,
    QueueConnection,
    TrainingSetup,
    WorkerTimeoutError,
    partition_mutations,
    run_coordinator,
    run_inproc,
    run_worker,
    wall_time_breakdown,
)
from esotn.seeds import derive_key, rng_from_key
from esotn.wire import IterationBegin, ReturnsReport, Shutdown, UpdateBroadcast, WorkerAssignment


def vector_params(values):
    values = np.asarray(values, dtype=np.float64)
    return PolicyParams(
        manifest=ParamManifest(tensors=(("theta", (values.size,)),)), values=values
    )


def quadratic_setup(dim=6, **config_overrides):
    rng = rng_from_key(derive_key(1234))
    target = rng.normal(size=dim)
    config = toy_config(num_mutations=8, iterations=5, **config_overrides)
    setup = TrainingSetup(
        es=config,
        manifest=ParamManifest(tensors=(("theta", (dim,)),)),
        evaluator=lambda p, s: -float(np.sum((p.values - target) ** 2)),
        iter_timeout=30.0,
    )
    return setup, vector_params(np.zeros(dim))


class TestPartition:
    def test_balanced_non_mirrored(self):
        sizes = [a.size for a in partition_mutations(10, 4)]
        assert sizes == [3, 3, 2, 2]

    def test_contiguous_cover(self):
        assignments = partition_mutations(10, 4)
        covered = [j for a in assignments for j in a.indices]
        assert covered == list(range(10))

    def test_mirrored_pair_aligned(self):
        assignments = partition_mutations(8, 2, mirrored=True)
        assert [a.size for a in assignments] == [4, 4]
        for a in assignments:
            assert a.start % 2 == 0 and a.size % 2 == 0

    def test_single_worker(self):
        (only,) = partition_mutations(7, 1)
        assert (only.start, only.stop) == (0, 7)

    def test_more_workers_than_mutations_rejected(self):
        with pytest.raises(ConfigurationError, match="cannot share"):
            partition_mutations(3, 4)

    def test_more_workers_than_pairs_rejected(self):
        with pytest.raises(ConfigurationError, match="pairs"):
            partition_mutations(4, 3, mirrored=True)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 32), st.booleans())
    def test_properties(self, k, n, mirrored):
        if mirrored:
            k *= 2
            if n > k // 2:
                n = k // 2
        elif n > k:
            n = k
        assignments = partition_mutations(k, n, mirrored)
        covered = [j for a in assignments for j in a.indices]
        assert covered == list(range(k)), "disjoint and covering, in order"
        sizes = [a.size for a in assignments]
        assert max(sizes) - min(sizes) <= (2 if mirrored else 1)
        if mirrored:
            assert all(size % 2 == 0 for size in sizes)
        assert [a.worker_id for a in assignments] == list(range(n))


class TestCoordinatorSingle:
    def test_matches_sequential_train_iteration(self):
        setup, theta0 = quadratic_setup()
        final, stats = run_coordinator(setup, theta0, [])
        theta = theta0
        for t in range(setup.es.iterations):
            theta, _ = train_iteration(theta, setup.es, t, setup.evaluator)
        assert np.array_equal(final.values, theta.values)
        assert len(stats.iterations) == setup.es.iterations

    def test_deterministic(self):
        setup, theta0 = quadratic_setup()
        a, _ = run_coordinator(setup, theta0, [])
        b, _ = run_coordinator(setup, theta0, [])
        assert np.array_equal(a.values, b.values)


class TestInproc:
    @pytest.mark.parametrize("n", [2, 4])
    def test_worker_count_invariance(self, n):
        setup, theta0 = quadratic_setup()
        solo, _ = run_coordinator(setup, theta0, [])
        multi, _ = run_inproc(setup, theta0, n)
        assert np.array_equal(solo.values, multi.values)

    def test_message_economy(self):
        # Per iteration exactly n-1 reports and n-1 broadcasts cross the
        # connections; nothing else.
        setup, theta0 = quadratic_setup()
        n = 3
        coordinator_ends = []
        threads = []
        for _ in range(n - 1):
            coord_end, worker_end = QueueConnection.pair()
            coordinator_ends.append(coord_end)
            thread = threading.Thread(
                target=run_worker, args=(setup, theta0, worker_end), daemon=True
            )
            thread.start()
            threads.append(thread)
        run_coordinator(setup, theta0, coordinator_ends)
        for thread in threads:
            thread.join(timeout=10.0)
        T = setup.es.iterations
        for coord_end in coordinator_ends:
            # coordinator sent: T begins + T broadcasts + 1 shutdown
            assert coord_end.sent_messages == 2 * T + 1

    def test_worker_exception_propagates(self):
        setup, theta0 = quadratic_setup()
        bad_setup = TrainingSetup(
            es=setup.es,
            manifest=ParamManifest(tensors=(("theta", (5,)),)),  # wrong dim
            evaluator=setup.evaluator,
            iter_timeout=5.0,
        )
        with pytest.raises(Exception):
            run_inproc(bad_setup, theta0, 2)


class TestWorkerProtocol:
    def test_shutdown_first_clean_exit(self):
        setup, theta0 = quadratic_setup()
        coord_end, worker_end = QueueConnection.pair()
        coord_end.send(Shutdown())
        assert run_worker(setup, theta0, worker_end) == 0

    def test_version_mismatch_fatal(self):
        setup, theta0 = quadratic_setup()
        coord_end, worker_end = QueueConnection.pair()
        coord_end.send(IterationBegin(t=0, theta_version=3, assignment=WorkerAssignment(1, 0, 2)))
        with pytest.raises(ProtocolError, match="version"):
            run_worker(setup, theta0, worker_end)

    def test_report_covers_assignment_and_update_applied(self):
        setup, theta0 = quadratic_setup()
        coord_end, worker_end = QueueConnection.pair()
        assignment = WorkerAssignment(worker_id=1, start=2, stop=6)
        results = {}

        def drive():
            coord_end.send(IterationBegin(t=0, theta_version=0, assignment=assignment))
            report = coord_end.recv(timeout=10.0)
            results["report"] = report
            delta = np.full(6, 0.25)
            coord_end.send(UpdateBroadcast(t=0, delta=delta))
            coord_end.send(
                IterationBegin(t=1, theta_version=1, assignment=assignment)
            )
            results["second"] = coord_end.recv(timeout=10.0)
            coord_end.send(UpdateBroadcast(t=1, delta=np.zeros(6)))
            coord_end.send(Shutdown())

        thread = threading.Thread(target=drive, daemon=True)
        thread.start()
        assert run_worker(setup, theta0, worker_end) == 0
        thread.join(timeout=10.0)
        report = results["report"]
        assert isinstance(report, ReturnsReport)
        assert [j for j, _ in report.returns] == list(assignment.indices)
        assert report.worker_id == 1
        # second iteration evaluated theta0 + 0.25: different returns
        assert results["second"].returns != report.returns

    def test_worker_epsilon_matches_coordinator_rederivation(self):
        # The worker derives perturbations locally; the coordinator's
        # update-side re-derivation must agree bit for bit. Exercised by
        # echoing the evaluated parameter vector through the fitness.
        from esotn.es import derive_perturbation, mutation_seed_sign

        setup, theta0 = quadratic_setup()
        es = setup.es
        seen = {}

        def capture(params, seeds):
            key = tuple(params.values.round(12))
            seen[len(seen)] = params.values.copy()
            return 0.0

        capture_setup = TrainingSetup(
            es=toy_config(num_mutations=4, iterations=1),
            manifest=setup.manifest,
            evaluator=capture,
        )
        coord_end, worker_end = QueueConnection.pair()
        coord_end.send(
            IterationBegin(t=0, theta_version=0, assignment=WorkerAssignment(1, 0, 4))
        )

        def finish():
            coord_end.recv(timeout=10.0)
            coord_end.send(UpdateBroadcast(t=0, delta=np.zeros(6)))
            coord_end.send(Shutdown())

        thread = threading.Thread(target=finish, daemon=True)
        thread.start()
        run_worker(capture_setup, theta0, worker_end)
        thread.join(timeout=10.0)
        for j in range(4):
            seed, sign = mutation_seed_sign(capture_setup.es, 0, j)
            epsilon = derive_perturbation(setup.manifest, seed, sign)
            expected = theta0.values + capture_setup.es.sigma * epsilon
            assert np.array_equal(seen[j], expected)


class TestTimeouts:
    def test_dead_socket_worker_aborts_with_name(self):
        # A worker whose connection drops mid-iteration must surface as a
        # diagnostic naming that worker and iteration.
        import socket as socket_module

        from esotn.runtime import _await_report
        from esotn.wire import SocketConnection

        listener = socket_module.socket(socket_module.AF_INET, socket_module.SOCK_STREAM)
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        port = listener.getsockname()[1]
        client = socket_module.create_connection(("127.0.0.1", port))
        server_side, _ = listener.accept()
        server_side.close()  # the "worker" dies
        conn = SocketConnection(client)
        with pytest.raises(WorkerTimeoutError, match="worker 1 died during iteration 0"):
            _await_report(conn, worker_id=1, t=0, deadline=time.monotonic() + 5.0)
        conn.close()
        listener.close()

    def test_silent_worker_times_out_with_name(self):
        setup, theta0 = quadratic_setup()
        fast = TrainingSetup(
            es=setup.es, manifest=setup.manifest, evaluator=setup.evaluator,
            iter_timeout=0.3,
        )
        dead_end, _ = QueueConnection.pair()  # nobody will ever answer
        with pytest.raises(WorkerTimeoutError, match="worker 1.*iteration 0"):
            run_coordinator(fast, theta0, [dead_end])

    def test_duplicate_indices_in_report_rejected(self):
        setup, theta0 = quadratic_setup()
        coord_end, worker_end = QueueConnection.pair()

        def rogue():
            msg = worker_end.recv(timeout=10.0)
            worker_end.send(
                ReturnsReport(
                    t=msg.t,
                    worker_id=msg.assignment.worker_id,
                    returns=((msg.assignment.start, 1.0), (msg.assignment.start, 2.0)),
                    eval_seconds=0.0,
                )
            )

        thread = threading.Thread(target=rogue, daemon=True)
        thread.start()
        with pytest.raises(ProtocolError, match="duplicate"):
            run_coordinator(setup, theta0, [coord_end])
        thread.join(timeout=10.0)

    def test_out_of_assignment_report_rejected(self):
        setup, theta0 = quadratic_setup()
        coord_end, worker_end = QueueConnection.pair()

        def rogue():
            msg = worker_end.recv(timeout=10.0)
            worker_end.send(
                ReturnsReport(
                    t=msg.t,
                    worker_id=msg.assignment.worker_id,
                    returns=tuple((j + 100, 1.0) for j in msg.assignment.indices),
                    eval_seconds=0.0,
                )
            )

        thread = threading.Thread(target=rogue, daemon=True)
        thread.start()
        with pytest.raises(ProtocolError, match="assigned"):
            run_coordinator(setup, theta0, [coord_end])
        thread.join(timeout=10.0)


class TestWallTimeBreakdown:
    def test_fractions_sum_to_one(self):
        setup, theta0 = quadratic_setup()
        _, stats = run_coordinator(setup, theta0, [])
        fractions = wall_time_breakdown(stats)
        assert abs(sum(fractions) - 1.0) <= 1e-6
        assert all(f >= 0 for f in fractions)

    def test_sleepy_evaluator_dominates(self):
        config = toy_config(num_mutations=2, iterations=1)

        def sleepy(params, seeds):
            time.sleep(0.3)
            return 1.0

        setup = TrainingSetup(
            es=config,
            manifest=ParamManifest(tensors=(("theta", (3,)),)),
            evaluator=sleepy,
        )
        _, stats = run_coordinator(setup, vector_params(np.zeros(3)), [])
        eval_fraction, _, _ = wall_time_breakdown(stats)
        assert eval_fraction > 0.95
