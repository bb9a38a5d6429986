"""Acceptance suite: one test per release criterion.

Each test prints one ``[ACCEPTANCE] <name>: PASS/FAIL`` line (visible
with ``pytest -s``) and enforces its runtime budget.  These run against
the real stack: real agents on real UDP sockets, the real HTTP API, and
real subprocesses for command execution.  No dashboard is involved.
"""

import math
import random
import socket
import threading
import time
from collections import defaultdict
from contextlib import contextmanager

import pytest

from c2ms import protocol
from c2ms.control import ExecutionMode
from c2ms.registry import CloudletRegistry
from c2ms.report import format_table
from c2ms.rrd import ArchiveSpec, ConsolidationFn, SeriesKey, SeriesStore, StaleSample
from c2ms.sim import (
    Constant,
    SimStack,
    bench_control,
    bench_query,
    http_json,
    spawn_agents,
    wait_for_fleet,
)


@contextmanager
def criterion(name, budget_s=None):
    t0 = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"\n[ACCEPTANCE] {name}: FAIL ({time.monotonic() - t0:.1f}s)")
        raise
    elapsed = time.monotonic() - t0
    if budget_s is not None:
        assert elapsed < budget_s, f"{name} took {elapsed:.1f}s, budget {budget_s}s"
    print(f"\n[ACCEPTANCE] {name}: PASS ({elapsed:.1f}s)")


def get_series(stack, token, scope, metric, start, end):
    path = f"/api/series?scope={scope}&metric={metric}&start={start}&end={end}"
    return http_json(stack.api.address, "GET", path, token=token)


def test_no_restart_migration(tmp_path):
    """Moving a host between cloudlets touches no agent and no daemon."""
    with criterion("no-restart migration", budget_s=30):
        store = SeriesStore(default_specs=(ArchiveSpec(1, 600), ArchiveSpec(30, 240)))
        stack = SimStack(store=store, clusters_path=str(tmp_path / "clusters")).start()
        fleet = spawn_agents(10, Constant(5.0), stack.udp_address,
                             heartbeat_interval=1, metric_interval=1)
        try:
            wait_for_fleet(stack, fleet.hostnames, timeout=10)
            time.sleep(2.5)  # two fine slots of metric data
            idents_before = [a.thread_ident for a in fleet.agents]
            iters_before = [a.stats.loop_iterations for a in fleet.agents]

            # instrument every way the mutating thread could reach the network
            mutator = threading.get_ident()
            touches = {"sockets_opened": 0, "bytes_sent_calls": 0}
            originals = {
                "__init__": socket.socket.__init__,
                "sendto": socket.socket.sendto,
                "send": socket.socket.send,
                "sendall": socket.socket.sendall,
                "connect": socket.socket.connect,
            }

            def spy(name):
                real = originals[name]

                def wrapper(self, *args, **kwargs):
                    if threading.get_ident() == mutator:
                        key = "sockets_opened" if name == "__init__" else "bytes_sent_calls"
                        touches[key] += 1
                    return real(self, *args, **kwargs)

                return wrapper

            for name in originals:
                setattr(socket.socket, name, spy(name))
            try:
                reg = stack.registry
                reg.create_cloudlet("groupA")
                reg.create_cloudlet("groupB")
                for h in fleet.hostnames[:5]:
                    reg.add_member("groupA", h)
                for h in fleet.hostnames[5:]:
                    reg.add_member("groupB", h)
                reg.move_member("node000", "groupA", "groupB")
            finally:
                for name, real in originals.items():
                    setattr(socket.socket, name, real)

            # (a) the registry sent nothing to anyone
            assert touches == {"sockets_opened": 0, "bytes_sent_calls": 0}

            # (b) agent loops are the same threads, still alive, still advancing
            time.sleep(1.5)
            assert [a.thread_ident for a in fleet.agents] == idents_before
            assert all(a.is_running() for a in fleet.agents)
            assert all(a.stats.loop_iterations > i0
                       for a, i0 in zip(fleet.agents, iters_before))

            # (c) the very next queries reflect the move
            token = stack.login_token()
            end = time.time()
            start = end - 30
            in_b = get_series(stack, token, "cloudlet:groupB", "cpu_user", start, end)
            in_a = get_series(stack, token, "cloudlet:groupA", "cpu_user", start, end)
            b_hosts = [l["host"] for l in in_b["layers"]]
            a_hosts = [l["host"] for l in in_a["layers"]]
            assert "node000" in b_hosts and "node000" not in a_hosts
            moved_layer = next(l for l in in_b["layers"] if l["host"] == "node000")
            assert any(v is not None for v in moved_layer["values"])
        finally:
            fleet.stop()
            stack.stop()


def test_aggregation_linearity():
    """Constant 1/2/3 agents for two minutes stack to exactly 6."""
    with criterion("aggregation linearity", budget_s=180):
        stack = SimStack().start()  # stock 15 s / 300 s archives
        fleets = [
            spawn_agents(1, Constant(value), stack.udp_address, seed=i,
                         heartbeat_interval=1, metric_interval=5, hostname_prefix=prefix)
            for i, (value, prefix) in enumerate([(1.0, "lina"), (2.0, "linb"), (3.0, "linc")])
        ]
        hosts = [f.hostnames[0] for f in fleets]
        try:
            wait_for_fleet(stack, hosts, timeout=10)
            time.sleep(120)

            stack.registry.create_cloudlet("lin")
            for h in hosts:
                stack.registry.add_member("lin", h)

            token = stack.login_token()
            end = time.time()
            start = end - 120
            stacked = get_series(stack, token, "cloudlet:lin", "cpu_user", start, end)
            assert [l["host"] for l in stacked["layers"]] == sorted(hosts)

            covered = [i for i, c in enumerate(stacked["coverage"]) if c == 3]
            assert len(covered) >= 4, "expected several fully covered slots"
            for i in covered:
                assert abs(stacked["sum"][i] - 6.0) <= 1e-9

            per_host = [get_series(stack, token, f"host:{h}", "cpu_user", start, end)
                        for h in sorted(hosts)]
            assert all(p["timestamps"] == stacked["timestamps"] for p in per_host)
            for i in range(len(stacked["timestamps"])):
                expected = 0.0
                for p in per_host:
                    v = p["layers"][0]["values"][i]
                    if v is not None:
                        expected += v
                assert stacked["sum"][i] == expected  # exact, same arithmetic order
        finally:
            for f in fleets:
                f.stop()
            stack.stop()


def test_rrd_consolidation_oracle():
    """1000 random streams against a brute-force mean; circular overwrite."""
    with criterion("rrd consolidation oracle", budget_s=60):
        rng = random.Random(0xACCE97)
        for case in range(1000):
            step = rng.choice([2, 5, 10, 15, 60])
            rows = rng.randrange(4, 32)
            store = SeriesStore(default_specs=(ArchiveSpec(step, rows),))
            key = SeriesKey("host", "metric")
            samples = []
            ts = float(rng.randrange(0, 10_000))
            for _ in range(rng.randrange(5, 80)):
                ts += rng.uniform(0.01, step * 1.5)
                value = rng.uniform(-1e6, 1e6)
                samples.append((ts, value))
                store.insert(key, ts, value)

            groups = defaultdict(list)
            for t, v in samples:
                groups[int(t // step) * step].append(v)
            open_slot = int(samples[-1][0] // step) * step
            got = dict(store.query(key, samples[0][0] - step, samples[-1][0] + step).points)
            oldest_retained = open_slot - step * rows
            for slot, values in groups.items():
                if slot == open_slot or slot <= oldest_retained:
                    continue  # open or overwritten
                mean = sum(values) / len(values)
                assert got[slot] == pytest.approx(mean, rel=1e-9), f"case {case} slot {slot}"

        # circular overwrite: rows + k slots then read the oldest survivor
        for rows, k in [(6, 1), (6, 4), (12, 12), (24, 3)]:
            store = SeriesStore(default_specs=(ArchiveSpec(10, rows),))
            key = SeriesKey("host", "metric")
            for i in range(rows + k):
                store.insert(key, i * 10, float(i))
            store.insert(key, (rows + k) * 10, -1.0)
            points = store.query(key, 0, (rows + k) * 10).points
            known = [(t, v) for t, v in points if v is not None]
            assert known[0] == (k * 10, float(k)), f"rows={rows} k={k}"
            assert len(known) == rows


def test_protocol_totality_and_round_trip():
    """10^4 datagrams round-trip; 10^4 random byte strings never crash decode."""
    with criterion("protocol totality + round-trip", budget_s=30):
        rng = random.Random(0x5EED)
        host_alphabet = "abcdefghijklmnopqrstuvwxyz0123456789.-_ABCDEFé中"
        name_alphabet = "abcdefghijklmnopqrstuvwxyz0123456789_"

        def random_datagram():
            host = "".join(rng.choice(host_alphabet) for _ in range(rng.randrange(1, 40)))
            ts = rng.randrange(0, 2**64)
            if rng.random() < 0.4:
                return protocol.heartbeat(host, ts)
            name = "".join(rng.choice(name_alphabet) for _ in range(rng.randrange(1, 30)))
            value = rng.choice([
                rng.uniform(-1e9, 1e9), 0.0, -0.0, 1e-300, -1e300, float(rng.randrange(-5, 6)),
            ])
            units = rng.choice(["", "%", "KB", "B/s", "C", "W", "°C"])
            slope = rng.choice(list(protocol.Slope))
            return protocol.metric(host, ts, name, value, units, slope)

        for i in range(10_000):
            d = random_datagram()
            assert protocol.decode(protocol.encode(d)) == d, f"round-trip case {i}"

        valid = protocol.encode(protocol.metric("node01", 1700000000, "cpu_user", 12.5, "%"))
        decoded = malformed = 0
        for i in range(10_000):
            mode = rng.random()
            if mode < 0.4:
                blob = rng.randbytes(rng.randrange(0, 80))
            elif mode < 0.7:
                blob = b"C2MS" + rng.randbytes(rng.randrange(0, 60))
            else:
                mutant = bytearray(valid)
                for _ in range(rng.randrange(1, 6)):
                    mutant[rng.randrange(len(mutant))] ^= 1 << rng.randrange(8)
                blob = bytes(mutant)
            try:
                d = protocol.decode(blob)
                decoded += 1
                assert protocol.decode(protocol.encode(d)) == d
            except protocol.MalformedError:
                malformed += 1
        assert decoded + malformed == 10_000  # totality: nothing else escaped


def test_liveness_detection():
    """A silenced agent is reported down within threshold + one poll."""
    with criterion("liveness", budget_s=120):
        stack = SimStack().start()  # default 20 s down threshold
        fleet = spawn_agents(1, Constant(1.0), stack.udp_address)  # default 5 s beats
        token = None
        try:
            wait_for_fleet(stack, fleet.hostnames, timeout=10)
            token = stack.login_token()

            def host_up():
                body = http_json(stack.api.address, "GET", "/api/hosts", token=token)
                return body["hosts"][0]["up"]

            assert host_up()
            silenced_at = time.monotonic()
            fleet.stop()

            while host_up():
                assert time.monotonic() - silenced_at <= 25.5, "down detection too slow"
                time.sleep(0.5)
            detection = time.monotonic() - silenced_at
            assert 10.0 <= detection <= 25.0, f"detected down after {detection:.1f}s"

            # resumes up on the next heartbeat (same hostname, fresh sender)
            resumed = spawn_agents(1, Constant(1.0), stack.udp_address)
            try:
                resumed_at = time.monotonic()
                while not host_up():
                    assert time.monotonic() - resumed_at <= 7, "never came back up"
                    time.sleep(0.25)
            finally:
                resumed.stop()
        finally:
            stack.stop()


def test_control_speedup_32_hosts():
    """Serial vs parallel 1 s task over 32 local targets, 5 reps each."""
    with criterion("control speedup", budget_s=240):
        serial, parallel, speedup = bench_control(host_count=32, task_duration_s=1.0,
                                                  repetitions=5, fanout_limit=64)
        print("\n" + format_table([serial, parallel]))
        print(f"speedup: {speedup:.1f}x")
        assert serial.mean_s >= 32.0
        assert parallel.mean_s <= 2.0
        assert speedup >= 16.0


def test_fleet_registration_at_scale(tmp_path):
    """130 agents up within two heartbeat intervals; query sweep stays fast."""
    with criterion("fleet registration at scale", budget_s=300):
        stack = SimStack().start()
        fleet = spawn_agents(130, Constant(10.0), stack.udp_address)  # default 5 s beats
        try:
            took = wait_for_fleet(stack, fleet.hostnames, timeout=10.0)
            assert took <= 10.0, f"fleet took {took:.1f}s to register"
            token = stack.login_token()
            body = http_json(stack.api.address, "GET", "/api/overview", token=token)
            up_hosts = [h for h in body["initial_pool"] if h["up"]]
            assert len(up_hosts) == 130

            time.sleep(35)  # two slot durations of the fine archive
            reports = bench_query(stack, fleet.hostnames, list(range(10, 131, 10)),
                                  repetitions=15, window_s=3600)
            print("\n" + format_table(reports))
            for r in reports:
                assert r.mean_s < 0.250, f"{r.scenario} mean {r.mean_s * 1000:.1f}ms"
        finally:
            fleet.stop()
            stack.stop()


def test_registry_disjointness_under_churn(tmp_path):
    """1000 random mutations against a set-model; persist/load identity."""
    with criterion("registry disjointness under churn", budget_s=30):
        rng = random.Random(0xD15707)
        reg = CloudletRegistry(path=str(tmp_path / "clusters"))
        model: dict[str, list[str]] = {}
        hosts = [f"node{i:02d}" for i in range(12)]

        def owner(host):
            for name, members in model.items():
                if host in members:
                    return name
            return None

        for step in range(1000):
            op = rng.choice(["create", "add", "add", "remove", "move", "move"])
            if op == "create":
                name = f"grp{rng.randrange(8)}"
                if name in model:
                    continue
                reg.create_cloudlet(name)
                model[name] = []
            elif not model:
                continue
            elif op == "add":
                name = rng.choice(sorted(model))
                host = rng.choice(hosts)
                if owner(host) is None:
                    reg.add_member(name, host)
                    model[name].append(host)
            elif op == "remove":
                name = rng.choice(sorted(model))
                if model[name]:
                    host = rng.choice(model[name])
                    reg.remove_member(name, host)
                    model[name].remove(host)
            else:
                src = rng.choice(sorted(model))
                dst = rng.choice(sorted(model))
                if model[src] and src != dst:
                    host = rng.choice(model[src])
                    reg.move_member(host, src, dst)
                    model[src].remove(host)
                    model[dst].append(host)

            state = {c.name: list(c.members) for c in reg.snapshot().cloudlets}
            assert state == model, f"state diverged at step {step}"
            flat = [h for members in state.values() for h in members]
            assert len(flat) == len(set(flat)), f"disjointness broken at step {step}"

        loaded = CloudletRegistry.load(str(tmp_path / "clusters"))
        assert loaded.snapshot().cloudlets == reg.snapshot().cloudlets


def test_summary_counts_four_member_cloudlet():
    """Four live single-CPU members: hosts_up 4, hosts_down 0, CPUs 4."""
    with criterion("summary counts", budget_s=60):
        stack = SimStack().start()
        fleet = spawn_agents(4, Constant(5.0), stack.udp_address,
                             heartbeat_interval=1, metric_interval=1, hostname_prefix="db")
        try:
            wait_for_fleet(stack, fleet.hostnames, timeout=10)
            deadline = time.monotonic() + 10
            while time.monotonic() < deadline:
                if all(stack.aggregator.latest_value(h, "cpu_num") == 1.0
                       for h in fleet.hostnames):
                    break
                time.sleep(0.2)
            token = stack.login_token()
            http_json(stack.api.address, "POST", "/api/cloudlets",
                      body={"name": "MySQL"}, token=token)
            for h in fleet.hostnames:
                http_json(stack.api.address, "POST", "/api/cloudlets/MySQL/members",
                          body={"host": h}, token=token)
            body = http_json(stack.api.address, "GET", "/api/overview", token=token)
            summary = body["cloudlets"][0]["summary"]
            assert summary == {"hosts_up": 4, "hosts_down": 0, "cpus_total": 4}
        finally:
            fleet.stop()
            stack.stop()
