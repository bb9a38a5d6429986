import time

import pytest

from c2ms.control import (
    ControlEngine,
    EmptyCommand,
    EmptyTargets,
    ExecutionMode,
    JobState,
    LocalTransport,
    MismatchedJobs,
    PaletteParseError,
    SshTransport,
    SpeedupReport,
    UnknownJob,
    popular_commands,
    run_one,
)

SERIAL = ExecutionMode.SERIAL
PARALLEL = ExecutionMode.PARALLEL


@pytest.fixture
def engine():
    return ControlEngine()


def hosts(n):
    return [f"host{i:03d}" for i in range(n)]


def test_submit_is_nonblocking_and_runs(engine):
    t0 = time.perf_counter()
    job_id = engine.submit(hosts(4), "sleep 0.3; echo hi", PARALLEL)
    assert time.perf_counter() - t0 < 0.1
    results = engine.await_results(job_id, timeout=10)
    assert len(results) == 4
    assert all(r.exit_code == 0 and r.stdout == b"hi\n" for r in results)


def test_empty_targets_and_command(engine):
    with pytest.raises(EmptyTargets):
        engine.submit([], "uptime", SERIAL)
    with pytest.raises(EmptyCommand):
        engine.submit(["h"], "   ", SERIAL)


def test_duplicate_targets_deduplicated(engine):
    job_id = engine.submit(["a", "b", "a", "b", "a"], "true", PARALLEL)
    results = engine.await_results(job_id, timeout=10)
    assert [r.hostname for r in results] == ["a", "b"]


def test_results_ordered_by_target_order(engine):
    order = ["zeta", "alpha", "mid"]
    job_id = engine.submit(order, "true", PARALLEL)
    assert [r.hostname for r in engine.await_results(job_id, timeout=10)] == order


def test_exit_codes_pass_through(engine):
    job_id = engine.submit(["h"], "exit 3", SERIAL)
    [r] = engine.await_results(job_id, timeout=10)
    assert r.exit_code == 3
    assert not r.ok


def test_parallel_wall_time_bound(engine):
    job_id = engine.submit(hosts(8), "sleep 1", PARALLEL, fanout_limit=8)
    results = engine.await_results(job_id, timeout=30)
    job = engine.get_job(job_id)
    assert len(results) == 8
    assert 1.0 <= job.wall_seconds < 2.0
    assert job.max_in_flight <= 8


def test_fanout_limit_respected(engine):
    # 8 quarter-second tasks through a fanout of 2: >= 4 batches
    job_id = engine.submit(hosts(8), "sleep 0.25", PARALLEL, fanout_limit=2)
    engine.await_results(job_id, timeout=30)
    job = engine.get_job(job_id)
    assert job.max_in_flight <= 2
    assert job.wall_seconds >= 4 * 0.25


def test_serial_lower_bound(engine):
    job_id = engine.submit(hosts(5), "sleep 0.2", SERIAL)
    engine.await_results(job_id, timeout=30)
    job = engine.get_job(job_id)
    assert job.wall_seconds >= 5 * 0.2
    assert job.max_in_flight == 1


def test_timeout_isolated_per_target(engine):
    job_id = engine.submit(["slow", "fast"], 'if [ "$0" = x ]; then :; fi; sleep 5', PARALLEL,
                           per_target_timeout=0.5)
    results = engine.await_results(job_id, timeout=30)
    assert all(r.timed_out for r in results)

    job_id = engine.submit(["a"], "echo done", PARALLEL, per_target_timeout=5)
    [r] = engine.await_results(job_id, timeout=30)
    assert not r.timed_out and r.exit_code == 0


def test_transport_error_isolated():
    engine = ControlEngine()

    class BrokenForOne(LocalTransport):
        def argv(self, hostname, command):
            if hostname == "dead":
                return ["/no/such/binary"]
            return super().argv(hostname, command)

    job_id = engine.submit(["dead", "alive"], "echo ok", PARALLEL, transport=BrokenForOne())
    results = {r.hostname: r for r in engine.await_results(job_id, timeout=10)}
    assert results["dead"].error is not None
    assert results["alive"].exit_code == 0
    assert results["alive"].stdout == b"ok\n"


def test_output_capped_at_one_mib(engine):
    job_id = engine.submit(["h"], "head -c 2097152 /dev/zero", SERIAL, per_target_timeout=20)
    [r] = engine.await_results(job_id, timeout=30)
    assert len(r.stdout) == 1 << 20
    assert r.stdout_truncated
    assert not r.stderr_truncated


def test_unknown_job(engine):
    with pytest.raises(UnknownJob):
        engine.await_results("job-999999")
    with pytest.raises(UnknownJob):
        engine.get_job("nope")


def test_speedup_report(engine):
    targets = hosts(4)
    serial_id = engine.submit(targets, "sleep 0.25", SERIAL)
    parallel_id = engine.submit(targets, "sleep 0.25", PARALLEL)
    engine.await_results(serial_id, timeout=30)
    engine.await_results(parallel_id, timeout=30)
    report = engine.speedup_report(serial_id, parallel_id)
    assert report.serial_s >= 1.0
    assert report.speedup == report.serial_s / report.parallel_s
    assert report.speedup > 1.5

    other = engine.submit(["x"], "true", SERIAL)
    engine.await_results(other, timeout=10)
    with pytest.raises(MismatchedJobs):
        engine.speedup_report(serial_id, other)


def test_speedup_identical_durations():
    assert SpeedupReport(2.0, 2.0).speedup == 1.0


def test_job_state_machine(engine):
    job_id = engine.submit(["h"], "sleep 0.4", SERIAL)
    job = engine.get_job(job_id)
    assert job.state in (JobState.PENDING, JobState.RUNNING)
    engine.await_results(job_id, timeout=10)
    assert job.state is JobState.DONE


def test_result_ttl_purge():
    engine = ControlEngine(result_ttl=0.0)
    old = engine.submit(["h"], "true", SERIAL)
    engine.await_results(old, timeout=10)
    time.sleep(0.05)
    engine.submit(["h"], "true", SERIAL)  # triggers purge
    with pytest.raises(UnknownJob):
        engine.get_job(old)


def test_ssh_transport_argv_and_classify():
    t = SshTransport(user="ops", identity="/tmp/key", connect_timeout=3, port=2222)
    argv = t.argv("node01", "uptime")
    assert argv[0] == "ssh"
    assert "BatchMode=yes" in argv
    assert "ops@node01" in argv
    assert argv[-1] == "uptime"
    assert "-i" in argv and "/tmp/key" in argv
    assert t.classify(255, b"ssh: connect to host node01: Connection refused\n") is not None
    assert t.classify(1, b"") is None
    assert LocalTransport().classify(255, b"") is None


def test_run_one_spawn_failure_is_transport_error():
    class Broken:
        def argv(self, hostname, command):
            return ["/no/such/binary"]

        def classify(self, exit_code, stderr):
            return None

    r = run_one(Broken(), "h", "x", timeout=5)
    assert r.error is not None and "spawn failed" in r.error


# -- popular commands -----------------------------------------------------------


def test_default_palette():
    palette = popular_commands()
    assert (palette[0].label, palette[0].command) == ("Uptime", "uptime")
    assert any(e.destructive for e in palette)
    reboot = next(e for e in palette if "reboot" in e.command)
    assert reboot.destructive


def test_palette_file(tmp_path):
    path = tmp_path / "palette"
    path.write_text("# ops favourites\nUptime | uptime\nWipe | rm -rf {} | destructive\n")
    palette = popular_commands(str(path))
    assert palette[0].label == "Uptime"
    assert palette[1].destructive
    assert "{}" in palette[1].command


def test_empty_palette_file(tmp_path):
    path = tmp_path / "palette"
    path.write_text("")
    assert popular_commands(str(path)) == []


def test_palette_parse_error_names_line(tmp_path):
    path = tmp_path / "palette"
    path.write_text("Uptime | uptime\njust a label\n")
    with pytest.raises(PaletteParseError) as err:
        popular_commands(str(path))
    assert ":2" in str(err.value)
