"""Concurrency stress and invariant checks for the versioned-parameter core.

These checks are the instrumented counterparts of the guarantees the shared
object is designed around:

* reclaim-once: a payload is recycled by at most one reclaimer;
* no read-after-reclaim: a registered reader that observed the version
  non-stale never dereferences a recycled payload (checked with a canary
  value and reclamation timestamps over millions of trials);
* monotone reads: the sequence numbers one thread observes never decrease;
* total order: successful installs carry strictly increasing sequence numbers;
* lock-freedom witness: every failed publish coincides with some other
  thread's successful publish;
* bounded footprint: an m-thread lock-free run keeps at most 3m live payloads.
"""

from __future__ import annotations

import sys
import threading
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .atomics import AtomicInt
from .data import synthetic_blobs
from .nn import Network, tiny_spec
from .optimizers import LeashedProbe, OptimizerConfig, RunResult, run_leashed
from .param_vector import PayloadPool, VersionSlot


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


# -- acquire/reclaim stress -------------------------------------------------------


@dataclass
class StressReport:
    reads: int
    publishes: int
    null_derefs: int
    canary_mismatches: int
    monotonic_violations: int
    reclaim_while_reading: int
    reclaim_once_violations: int
    install_order_violations: int
    peak_live_payloads: int
    duration_s: float

    def ok(self) -> bool:
        return (
            self.null_derefs == 0
            and self.canary_mismatches == 0
            and self.monotonic_violations == 0
            and self.reclaim_while_reading == 0
            and self.reclaim_once_violations == 0
            and self.install_order_violations == 0
        )


def stress_acquire_latest(
    total_reads: int = 1_000_000,
    readers: int = 4,
    writers: int = 2,
    d: int = 64,
    switch_interval: Optional[float] = 1e-5,
) -> StressReport:
    """Hammer acquire/release against concurrent publish-and-reclaim.

    Writers run the copy/publish/reclaim cycle; each published payload carries
    its own sequence number in element 0, so a reader that ever sees a
    recycled buffer notices the canary mismatch.  Readers additionally check
    per-thread monotonicity of observed sequence numbers and that no
    reclamation lands inside their registered dereference window.
    """
    pool = PayloadPool(census=True)
    init = pool.new_param_vector(d)
    slot = VersionSlot(init)
    slot.install_log = []

    reads_done = AtomicInt(0)
    stop_writers = threading.Event()
    null_derefs = AtomicInt(0)
    canary_mismatches = AtomicInt(0)
    monotonic_violations = AtomicInt(0)
    reclaim_while_reading = AtomicInt(0)
    publishes = AtomicInt(0)

    def reader() -> None:
        last_t = -1
        while reads_done.fetch_add(1) < total_reads:
            pv = slot.acquire_latest()
            t = pv.t.load()
            arr = pv.payload_or_none()
            if arr is None:
                null_derefs.fetch_add(1)
            elif arr[0] != t:
                canary_mismatches.fetch_add(1)
            if t < last_t:
                monotonic_violations.fetch_add(1)
            last_t = t
            deref_end = time.monotonic_ns()
            reclaimed_at = pv.reclaim_ns
            if reclaimed_at is not None and reclaimed_at < deref_end:
                reclaim_while_reading.fetch_add(1)
            pv.stop_reading()

    def writer() -> None:
        while not stop_writers.is_set():
            candidate = pool.new_param_vector(d)
            while True:
                cur = slot.acquire_latest()
                cur_t = cur.t.load()
                np.copyto(candidate.theta, cur.theta)
                candidate.t.store(cur_t + 1)
                candidate.theta[0] = cur_t + 1
                cur.stop_reading()
                if slot.try_install(cur, candidate):
                    publishes.fetch_add(1)
                    cur.stale_flag.store(True)
                    cur.safe_delete()
                    break
                if stop_writers.is_set():
                    candidate.stale_flag.store(True)
                    candidate.safe_delete()
                    break

    old_interval = sys.getswitchinterval()
    if switch_interval is not None:
        sys.setswitchinterval(switch_interval)
    started = time.monotonic()
    try:
        threads = [threading.Thread(target=reader) for _ in range(readers)]
        threads += [threading.Thread(target=writer) for _ in range(writers)]
        for t in threads:
            t.start()
        for t in threads[:readers]:
            t.join()
        stop_writers.set()
        for t in threads[readers:]:
            t.join()
    finally:
        sys.setswitchinterval(old_interval)
    duration = time.monotonic() - started

    reclaim_once = sum(
        1 for pv in pool.iter_instances() if pv.reclaim_count > 1
    ) + sum(
        1
        for pv in pool.iter_instances()
        if pv.deleted.load() and pv.reclaim_count != 1
    )
    log = slot.install_log or []
    install_violations = sum(
        1 for a, b in zip(log, log[1:]) if b <= a
    )
    return StressReport(
        reads=total_reads,
        publishes=publishes.load(),
        null_derefs=null_derefs.load(),
        canary_mismatches=canary_mismatches.load(),
        monotonic_violations=monotonic_violations.load(),
        reclaim_while_reading=reclaim_while_reading.load(),
        reclaim_once_violations=reclaim_once,
        install_order_violations=install_violations,
        peak_live_payloads=pool.peak_live_payloads,
        duration_s=duration,
    )


# -- pool bookkeeping ---------------------------------------------------------------


def check_pool_integrity(pool: PayloadPool) -> list[str]:
    """Reclaim-once and census-honesty violations, as human-readable strings."""
    problems = []
    for pv in pool.iter_instances():
        if pv.reclaim_count > 1:
            problems.append(f"payload reclaimed {pv.reclaim_count} times")
        if pv.deleted.load() and pv.reclaim_count != 1:
            problems.append("deleted flag set without exactly one reclamation")
        if not pv.deleted.load() and pv.reclaim_count != 0:
            problems.append("reclamation happened without the deleted flag")
    if pool.live_payloads != pool.alloc_total - pool.reclaim_total:
        problems.append(
            f"census mismatch: live={pool.live_payloads} "
            f"alloc={pool.alloc_total} reclaim={pool.reclaim_total}"
        )
    if pool.census_enabled and pool.events:
        lives = [live for (_, live, _) in pool.events]
        for a, b in zip(lives, lives[1:]):
            if abs(b - a) != 1:
                problems.append(f"census sample jumped from {a} to {b}")
                break
        if max(lives) != pool.peak_live_payloads:
            problems.append("peak census sample disagrees with peak counter")
        if lives[-1] != pool.live_payloads:
            problems.append("last census sample disagrees with live counter")
    return problems


# -- lock-free run invariants --------------------------------------------------------


def check_sequence_permutation(result: RunResult) -> list[str]:
    """Published seq values must be exactly 1..T with no duplicates."""
    seqs = sorted(r.seq for r in result.records if not r.abandoned)
    problems = []
    if seqs != list(range(1, len(seqs) + 1)):
        problems.append(
            f"published sequence numbers are not a gap-free permutation "
            f"(count={len(seqs)}, min={seqs[0] if seqs else None}, "
            f"max={seqs[-1] if seqs else None})"
        )
    return problems


def check_lock_freedom_witness(
    probe: LeashedProbe, result: RunResult, window_ns: int = 50_000_000
) -> list[str]:
    """Every failed swap must coincide with somebody else's publish.

    Exact form: the observed latest at failure time carries a strictly larger
    sequence number than the version the failed swap expected.  Windowed
    form: any wall-clock window containing failures also contains publishes
    (the immediately preceding window is accepted to absorb timestamp skew
    between the winner's clock read and the loser's).
    """
    problems = []
    for tid, _start, _fail, expected_t, observed_t in probe.failures:
        if observed_t <= expected_t:
            problems.append(
                f"thread {tid} failed a swap without observing progress "
                f"(expected {expected_t}, observed {observed_t})"
            )
    if probe.failures:
        pub_windows = {
            r.wall_ns // window_ns for r in result.records if not r.abandoned
        }
        for _tid, _start, fail_ns, _e, _o in probe.failures:
            w = fail_ns // window_ns
            if w not in pub_windows and (w - 1) not in pub_windows:
                problems.append(f"window {w} has failures but no publishes nearby")
                break
    return problems


def check_publication_accounting(result: RunResult) -> list[str]:
    """Each candidate is published once or abandoned once, never both.

    The lock-free run allocates exactly one payload for the initial version,
    one gradient buffer per thread, and one candidate per publish attempt
    cycle, so the pool totals must tie out.
    """
    published = sum(1 for r in result.records if not r.abandoned)
    abandoned = sum(1 for r in result.records if r.abandoned)
    expected = 1 + result.config.m + published + abandoned
    problems = []
    if result.pool.alloc_total != expected:
        problems.append(
            f"allocation count {result.pool.alloc_total} != "
            f"1 + m + published + abandoned = {expected}"
        )
    return problems


def leashed_invariant_run(
    m: int = 4,
    updates: int = 10_000,
    persistence: Optional[int] = None,
    seed: int = 1,
    switch_interval: Optional[float] = 1e-5,
) -> tuple[RunResult, LeashedProbe, list[str]]:
    """A monitored-free lock-free run plus every invariant check on it.

    The convergence monitor is disabled so the live-payload census reflects
    the m worker threads alone (the monitor would register as an extra
    reader and could briefly hold one superseded version).
    """
    dataset = synthetic_blobs(classes=3, dims=8, per_class=200, spread=0.3, seed=seed)
    network = Network(tiny_spec(8, 3, hidden=8))
    config = OptimizerConfig(
        algo="leashed",
        m=m,
        eta=0.05,
        persistence=persistence,
        batch_size=4,
        seed=seed,
        time_budget=90.0,
        epsilon_list=(),
        max_updates=updates,
        monitor=False,
        switch_interval=switch_interval,
    )
    probe = LeashedProbe()
    result = run_leashed(config, network, dataset, probe=probe)
    problems = []
    problems += check_pool_integrity(result.pool)
    problems += check_sequence_permutation(result)
    problems += check_lock_freedom_witness(probe, result)
    problems += check_publication_accounting(result)
    if result.pool.peak_live_payloads > 3 * m:
        problems.append(
            f"live payloads peaked at {result.pool.peak_live_payloads} > 3m = {3 * m}"
        )
    return result, probe, problems


# -- entry point -----------------------------------------------------------------------


def run_verification(fast: bool = False) -> list[CheckResult]:
    """Execute the full stress/invariant suite; ``fast`` shrinks the scale."""
    results = []

    reads = 100_000 if fast else 1_000_000
    stress = stress_acquire_latest(total_reads=reads)
    results.append(
        CheckResult(
            "acquire-release stress",
            stress.ok(),
            f"{stress.reads} reads, {stress.publishes} publishes, "
            f"{stress.null_derefs} null derefs, {stress.canary_mismatches} canary "
            f"mismatches, {stress.monotonic_violations} monotonicity violations, "
            f"{stress.reclaim_while_reading} reclaim-while-reading, "
            f"{stress.install_order_violations} install-order violations "
            f"in {stress.duration_s:.1f}s",
        )
    )

    updates = 2_000 if fast else 10_000
    for m, persistence in ((2, None), (4, 1), (8, 0)):
        result, probe, problems = leashed_invariant_run(
            m=m, updates=updates, persistence=persistence
        )
        published = sum(1 for r in result.records if not r.abandoned)
        label = "inf" if persistence is None else str(persistence)
        results.append(
            CheckResult(
                f"lock-free run m={m} tp={label}",
                not problems,
                (
                    f"{published} published, "
                    f"{len(probe.failures)} failed swaps, peak live "
                    f"{result.pool.peak_live_payloads} <= {3 * m}"
                    if not problems
                    else "; ".join(problems)
                ),
            )
        )
    return results
