"""The four training loops: sequential, lock-based, synchronization-free, lock-free.

All four produce the same telemetry stream: one :class:`UpdateRecord` per
published (or abandoned) update, periodic loss samples from a monitor thread,
and a census of live parameter payloads.  Staleness accounting follows one
discipline across algorithms: with t_g the sequence number of the version a
gradient was computed from, t_e the sequence number of the latest version at
entry to the publish phase, and t_p the sequence number this update
published, tau_c = t_e - t_g and tau_s = t_p - 1 - t_e.  The lock-based loop
reads t_e immediately after taking the update lock, so its tau_s is
structurally zero; the synchronization-free loop has no publish phase and
records tau_c as the width of the interval between a pre-copy and post-update
read of the shared counter (which includes its own update) with tau_s = 0.

Worker telemetry is thread-local and merged after join; independent runs may
execute concurrently.
"""

from __future__ import annotations

import os
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .data import Dataset
from .nn import Network, loss_and_gradient, mean_loss
from .param_vector import ParameterVector, PayloadPool, VersionSlot

ALGORITHMS = ("seq", "async", "hogwild", "leashed")

STATUS_CONVERGED = "Converged"
STATUS_DIVERGE = "Diverge"
STATUS_CRASH = "Crash"


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings shared by all run_* entry points.

    ``persistence`` is the maximum number of failed publish attempts before a
    gradient is dropped (``None`` = unbounded); it only affects the lock-free
    loop.  ``epsilon_list`` holds loss thresholds as fractions of the
    initial loss; the run converges once the smallest one is reached.
    Thresholds are checked by a monitor thread every ``eval_every`` seconds
    and, when ``eval_every_updates`` is set, also by the publishing worker at
    every multiple of that update count -- the latter trigger is what makes
    iterations-to-threshold reproducible for deterministic runs.
    """

    algo: str
    m: int = 1
    eta: float = 0.005
    persistence: Optional[int] = None
    batch_size: int = 32
    seed: int = 0
    time_budget: float = 120.0
    epsilon_list: tuple[float, ...] = (0.5,)
    max_updates: Optional[int] = None
    eval_every: float = 0.25
    eval_every_updates: Optional[int] = None
    eval_size: int = 1000
    monitor: bool = True
    record_trajectory: bool = False
    pin_cores: bool = False
    switch_interval: Optional[float] = None

    def __post_init__(self) -> None:
        if self.algo not in ALGORITHMS:
            raise ValueError(f"algo must be one of {ALGORITHMS}, got {self.algo!r}")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.algo == "seq" and self.m != 1:
            raise ValueError("sequential SGD runs with m=1")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.persistence is not None and self.persistence < 0:
            raise ValueError("persistence must be >= 0 or None for unbounded")
        if self.eval_every_updates is not None and self.eval_every_updates < 1:
            raise ValueError("eval_every_updates must be >= 1")
        for eps in self.epsilon_list:
            if not 0 < eps <= 1:
                raise ValueError(f"epsilon {eps} outside (0, 1]")
        if self.time_budget <= 0:
            raise ValueError("time_budget must be positive")


class UpdateRecord(NamedTuple):
    """Telemetry for one publish attempt that left the retry loop.

    ``seq`` is the published sequence number, or 0 for abandoned gradients
    (which never publish).  ``tries`` counts publish attempts (always 1
    outside the lock-free loop).
    """

    thread_id: int
    seq: int
    wall_ns: int
    tau_c: int
    tau_s: int
    tries: int
    abandoned: bool


@dataclass
class RunResult:
    """Everything a single optimizer run produced."""

    config: OptimizerConfig
    status: str
    f0: float
    wall_ns: int
    published: int
    records: list[UpdateRecord]
    progress: list[tuple[int, int, float]]  # (wall_ns, seq, loss)
    memory: list[tuple[int, int, int]]  # (wall_ns, live_payloads, live_bytes)
    eps_hits: dict[float, tuple[int, int]]  # eps -> (wall_ns, iterations)
    pool: PayloadPool
    final_theta: np.ndarray
    trajectory: Optional[list[tuple[int, bytes]]] = None


class LeashedProbe:
    """Optional instrumentation for the lock-free publish loop.

    Collects, per failed publish attempt, the attempt's start time, failure
    time, and the sequence numbers of the expected versus observed latest
    version.  A failure with ``observed_t <= expected_t`` would falsify the
    progress argument (someone must have published for the swap to fail).
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.failures: list[tuple[int, int, int, int, int]] = []

    def on_cas_failure(
        self,
        thread_id: int,
        attempt_start_ns: int,
        fail_ns: int,
        expected_t: int,
        observed_t: int,
    ) -> None:
        with self._lock:
            self.failures.append(
                (thread_id, attempt_start_ns, fail_ns, expected_t, observed_t)
            )


@dataclass
class _RunState:
    config: OptimizerConfig
    network: Network
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    pool: PayloadPool
    published_fn: Callable[[], int]
    read_fn: Callable[[], tuple[int, np.ndarray]]
    t0_ns: int = 0
    deadline: float = 0.0
    stop: threading.Event = field(default_factory=threading.Event)
    crashed: threading.Event = field(default_factory=threading.Event)
    records: list[list[UpdateRecord]] = field(default_factory=list)
    trajectory: list[tuple[int, bytes]] = field(default_factory=list)
    progress: list[tuple[int, int, float]] = field(default_factory=list)
    eps_hits: dict[float, tuple[int, int]] = field(default_factory=dict)
    f0: float = 0.0
    errors: list[BaseException] = field(default_factory=list)
    probe: Optional[LeashedProbe] = None
    _eval_lock: threading.Lock = field(default_factory=threading.Lock)

    def now_ns(self) -> int:
        return time.monotonic_ns() - self.t0_ns

    def should_stop(self) -> bool:
        if self.stop.is_set() or time.monotonic() >= self.deadline:
            return True
        cap = self.config.max_updates
        return cap is not None and self.published_fn() >= cap

    def flag_crash(self) -> None:
        self.crashed.set()
        self.stop.set()

    def record_eval(self, seq: int, loss: float) -> None:
        """Record one loss sample and apply the convergence/crash rules."""
        cfg = self.config
        with self._eval_lock:
            self.progress.append((self.now_ns(), seq, loss))
            if not np.isfinite(loss):
                self.flag_crash()
                return
            for eps in cfg.epsilon_list:
                if eps not in self.eps_hits and loss <= eps * self.f0:
                    self.eps_hits[eps] = (self.now_ns(), seq)
            if cfg.epsilon_list and min(cfg.epsilon_list) in self.eps_hits:
                self.stop.set()

    def maybe_eval_at(self, seq: int) -> None:
        """Worker-side convergence check at update-count multiples."""
        n = self.config.eval_every_updates
        if n is None or seq % n:
            return
        read_seq, theta = self.read_fn()
        loss = mean_loss(self.network, theta, self.eval_x, self.eval_y)
        self.record_eval(read_seq, loss)


def _thread_rng(seed: int, thread_id: int) -> np.random.Generator:
    return np.random.default_rng((seed ^ thread_id) & 0xFFFF_FFFF_FFFF_FFFF)


def _pin_to_core(thread_id: int) -> None:
    if hasattr(os, "sched_setaffinity"):
        cores = sorted(os.sched_getaffinity(0))
        os.sched_setaffinity(0, {cores[thread_id % len(cores)]})


def _training_inputs(network: Network, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    if network.input_is_flat:
        return dataset.images, dataset.labels
    return dataset.as_images(), dataset.labels


def _monitor_loop(state: _RunState, done: threading.Event) -> None:
    """Evaluate the shared parameters on the fixed subset until the run ends."""
    while True:
        seq, theta = state.read_fn()
        loss = mean_loss(state.network, theta, state.eval_x, state.eval_y)
        state.record_eval(seq, loss)
        if done.is_set():
            return
        done.wait(state.config.eval_every)


# -- worker bodies ------------------------------------------------------------------


def _sample_batch(
    state: _RunState, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.integers(0, state.train_x.shape[0], size=state.config.batch_size)
    return state.train_x[idx], state.train_y[idx]


def _seq_worker(state: _RunState, pv: ParameterVector) -> None:
    cfg = state.config
    rng = _thread_rng(cfg.seed, 0)
    grad_buf = state.pool.new_param_vector(state.network.d)
    records = state.records[0]
    while not state.should_stop():
        x, y = _sample_batch(state, rng)
        loss, grad = loss_and_gradient(
            state.network, pv.theta, x, y, grad_out=grad_buf.theta
        )
        if not np.isfinite(loss):
            state.flag_crash()
            return
        seq = pv.update(grad, cfg.eta)
        records.append(UpdateRecord(0, seq, state.now_ns(), 0, 0, 1, False))
        if cfg.record_trajectory:
            state.trajectory.append((seq, pv.theta.tobytes()))
        state.maybe_eval_at(seq)


def _async_worker(
    state: _RunState, tid: int, param: ParameterVector, mtx: threading.Lock
) -> None:
    cfg = state.config
    if cfg.pin_cores:
        _pin_to_core(tid)
    rng = _thread_rng(cfg.seed, tid)
    local = state.pool.new_param_vector(state.network.d)
    grad_buf = state.pool.new_param_vector(state.network.d)
    records = state.records[tid]
    while not state.should_stop():
        x, y = _sample_batch(state, rng)
        with mtx:
            np.copyto(local.theta, param.theta)
            t_g = param.t.load()
        loss, grad = loss_and_gradient(
            state.network, local.theta, x, y, grad_out=grad_buf.theta
        )
        if not np.isfinite(loss):
            state.flag_crash()
            return
        with mtx:
            t_e = param.t.load()
            seq = param.update(grad, cfg.eta)
            wall = state.now_ns()
            if cfg.record_trajectory:
                snap = param.theta.tobytes()
        records.append(UpdateRecord(tid, seq, wall, t_e - t_g, seq - 1 - t_e, 1, False))
        if cfg.record_trajectory:
            state.trajectory.append((seq, snap))
        state.maybe_eval_at(seq)


def _hogwild_worker(state: _RunState, tid: int, param: ParameterVector) -> None:
    cfg = state.config
    if cfg.pin_cores:
        _pin_to_core(tid)
    rng = _thread_rng(cfg.seed, tid)
    local = state.pool.new_param_vector(state.network.d)
    grad_buf = state.pool.new_param_vector(state.network.d)
    records = state.records[tid]
    while not state.should_stop():
        x, y = _sample_batch(state, rng)
        t_before = param.t.load()
        np.copyto(local.theta, param.theta)  # unsynchronized copy, races allowed
        loss, grad = loss_and_gradient(
            state.network, local.theta, x, y, grad_out=grad_buf.theta
        )
        if not np.isfinite(loss):
            state.flag_crash()
            return
        seq = param.update_sparse(grad, cfg.eta)
        wall = state.now_ns()
        t_after = param.t.load()
        records.append(UpdateRecord(tid, seq, wall, t_after - t_before, 0, 1, False))
        if cfg.record_trajectory:
            state.trajectory.append((seq, param.theta.tobytes()))
        state.maybe_eval_at(seq)


def _leashed_worker(state: _RunState, tid: int, slot: VersionSlot) -> None:
    cfg = state.config
    if cfg.pin_cores:
        _pin_to_core(tid)
    rng = _thread_rng(cfg.seed, tid)
    grad_buf = state.pool.new_param_vector(state.network.d)
    records = state.records[tid]
    probe = state.probe
    t_p_bound = cfg.persistence
    while not state.should_stop():
        x, y = _sample_batch(state, rng)
        latest = slot.acquire_latest()
        t_g = latest.t.load()
        loss, grad = loss_and_gradient(
            state.network, latest.theta, x, y, grad_out=grad_buf.theta
        )
        latest.stop_reading()
        if not np.isfinite(loss):
            state.flag_crash()
            return
        candidate = state.pool.new_param_vector(state.network.d)
        attempts = 0
        failures = 0
        t_e = -1
        while True:
            attempt_start = state.now_ns() if probe is not None else 0
            cur = slot.acquire_latest()
            cur_t = cur.t.load()
            if t_e < 0:
                t_e = cur_t
            np.copyto(candidate.theta, cur.theta)
            candidate.t.store(cur_t)
            cur.stop_reading()
            seq = candidate.update(grad, cfg.eta)
            attempts += 1
            if slot.try_install(cur, candidate):
                wall = state.now_ns()
                cur.stale_flag.store(True)
                cur.safe_delete()
                records.append(
                    UpdateRecord(tid, seq, wall, t_e - t_g, seq - 1 - t_e, attempts, False)
                )
                if cfg.record_trajectory:
                    state.trajectory.append((seq, candidate.theta.tobytes()))
                state.maybe_eval_at(seq)
                break
            failures += 1
            if probe is not None:
                observed = slot.load().t.load()
                probe.on_cas_failure(
                    tid, attempt_start, state.now_ns(), cur_t, observed
                )
            if t_p_bound is not None and failures > t_p_bound:
                # Discard the candidate: it was never published, so marking it
                # stale cannot race with any reader registration.
                candidate.stale_flag.store(True)
                candidate.safe_delete()
                observed = slot.load().t.load()
                records.append(
                    UpdateRecord(
                        tid,
                        0,
                        state.now_ns(),
                        t_e - t_g,
                        max(observed - t_e, 0),
                        attempts,
                        True,
                    )
                )
                break


# -- orchestration --------------------------------------------------------------------


def _execute(
    state: _RunState,
    worker_bodies: list[Callable[[], None]],
) -> RunResult:
    cfg = state.config
    old_interval = None
    if cfg.switch_interval is not None:
        old_interval = sys.getswitchinterval()
        sys.setswitchinterval(cfg.switch_interval)
    try:
        state.t0_ns = time.monotonic_ns()
        state.pool.set_epoch(state.t0_ns)
        state.deadline = time.monotonic() + cfg.time_budget

        def _guarded(body: Callable[[], None]) -> None:
            try:
                body()
            except BaseException as exc:  # surfaced after join
                state.errors.append(exc)
                state.stop.set()

        workers = [
            threading.Thread(target=_guarded, args=(body,), name=f"worker-{i}")
            for i, body in enumerate(worker_bodies)
        ]
        done = threading.Event()
        monitor = None
        if cfg.monitor:
            monitor = threading.Thread(
                target=_monitor_loop, args=(state, done), name="monitor"
            )
            monitor.start()
        for w in workers:
            w.start()
        join_deadline = time.monotonic() + cfg.time_budget + 30.0
        for w in workers:
            w.join(timeout=max(0.0, join_deadline - time.monotonic()))
            if w.is_alive():
                state.stop.set()
                raise RuntimeError(f"worker {w.name} failed to stop within grace period")
        done.set()
        if monitor is not None:
            monitor.join()
        wall_ns = time.monotonic_ns() - state.t0_ns
    finally:
        if old_interval is not None:
            sys.setswitchinterval(old_interval)

    if state.errors:
        raise RuntimeError("worker thread raised") from state.errors[0]

    if state.crashed.is_set():
        status = STATUS_CRASH
    elif not cfg.epsilon_list or min(cfg.epsilon_list) in state.eps_hits:
        status = STATUS_CONVERGED
    else:
        status = STATUS_DIVERGE

    records: list[UpdateRecord] = []
    for chunk in state.records:
        records.extend(chunk)
    records.sort(key=lambda r: (r.wall_ns, r.seq))
    _, final_theta = state.read_fn()

    return RunResult(
        config=cfg,
        status=status,
        f0=state.f0,
        wall_ns=wall_ns,
        published=state.published_fn(),
        records=records,
        progress=state.progress,
        memory=list(state.pool.events),
        eps_hits=dict(state.eps_hits),
        pool=state.pool,
        final_theta=final_theta,
        trajectory=state.trajectory if cfg.record_trajectory else None,
    )


def _make_state(
    config: OptimizerConfig,
    network: Network,
    dataset: Dataset,
    published_fn: Callable[[], int],
    read_fn: Callable[[], tuple[int, np.ndarray]],
    pool: PayloadPool,
    probe: Optional[LeashedProbe],
) -> _RunState:
    train_x, train_y = _training_inputs(network, dataset)
    eval_ds = dataset.eval_subset(config.eval_size)
    eval_x, eval_y = _training_inputs(network, eval_ds)
    state = _RunState(
        config=config,
        network=network,
        train_x=train_x,
        train_y=train_y,
        eval_x=eval_x,
        eval_y=eval_y,
        pool=pool,
        published_fn=published_fn,
        read_fn=read_fn,
        probe=probe,
    )
    state.records = [[] for _ in range(config.m)]
    return state


def run_seq(
    config: OptimizerConfig, network: Network, dataset: Dataset
) -> RunResult:
    """Sequential SGD on a private parameter vector; bitwise deterministic."""
    if config.algo != "seq":
        raise ValueError("config.algo must be 'seq'")
    pool = PayloadPool(census=True)
    pv = pool.new_param_vector(network.d)
    pv.rand_init(config.seed)

    def read_fn() -> tuple[int, np.ndarray]:
        return pv.t.load(), np.array(pv.theta)

    state = _make_state(
        config, network, dataset, lambda: pv.t.load(), read_fn, pool, None
    )
    state.f0 = mean_loss(network, pv.theta, state.eval_x, state.eval_y)
    return _execute(state, [lambda: _seq_worker(state, pv)])


def run_async_lock(
    config: OptimizerConfig, network: Network, dataset: Dataset
) -> RunResult:
    """Lock-based workers: mutual exclusion around both the copy and the update."""
    if config.algo != "async":
        raise ValueError("config.algo must be 'async'")
    pool = PayloadPool(census=True)
    param = pool.new_param_vector(network.d)
    param.rand_init(config.seed)
    mtx = threading.Lock()

    def read_fn() -> tuple[int, np.ndarray]:
        with mtx:
            return param.t.load(), np.array(param.theta)

    state = _make_state(
        config, network, dataset, lambda: param.t.load(), read_fn, pool, None
    )
    state.f0 = mean_loss(network, param.theta, state.eval_x, state.eval_y)
    bodies = [
        (lambda i=i: _async_worker(state, i, param, mtx)) for i in range(config.m)
    ]
    return _execute(state, bodies)


def run_hogwild(
    config: OptimizerConfig, network: Network, dataset: Dataset
) -> RunResult:
    """Synchronization-free workers: racy copies and element-wise racy updates."""
    if config.algo != "hogwild":
        raise ValueError("config.algo must be 'hogwild'")
    pool = PayloadPool(census=True)
    param = pool.new_param_vector(network.d)
    param.rand_init(config.seed)

    def read_fn() -> tuple[int, np.ndarray]:
        return param.t.load(), np.array(param.theta)

    state = _make_state(
        config, network, dataset, lambda: param.t.load(), read_fn, pool, None
    )
    state.f0 = mean_loss(network, param.theta, state.eval_x, state.eval_y)
    bodies = [(lambda i=i: _hogwild_worker(state, i, param)) for i in range(config.m)]
    return _execute(state, bodies)


def run_leashed(
    config: OptimizerConfig,
    network: Network,
    dataset: Dataset,
    probe: Optional[LeashedProbe] = None,
) -> RunResult:
    """Lock-free loop: copy the latest version, apply the update, publish by CAS.

    On publish the predecessor is marked stale and reclaimed once reader-free;
    after more than ``persistence`` failed swaps the candidate is discarded
    and the thread returns to gradient computation.  Note the monitor thread,
    when enabled, registers as an extra reader and can briefly keep one
    superseded version alive beyond the workers' own footprint.
    """
    if config.algo != "leashed":
        raise ValueError("config.algo must be 'leashed'")
    pool = PayloadPool(census=True)
    init = pool.new_param_vector(network.d)
    init.rand_init(config.seed)
    slot = VersionSlot(init)
    if probe is not None:
        slot.install_log = []

    def read_fn() -> tuple[int, np.ndarray]:
        pv = slot.acquire_latest()
        seq = pv.t.load()
        theta = np.array(pv.theta)
        pv.stop_reading()
        return seq, theta

    state = _make_state(
        config,
        network,
        dataset,
        lambda: slot.load().t.load(),
        read_fn,
        pool,
        probe,
    )
    state.f0 = mean_loss(network, init.theta, state.eval_x, state.eval_y)
    bodies = [(lambda i=i: _leashed_worker(state, i, slot)) for i in range(config.m)]
    result = _execute(state, bodies)
    return result


def run(
    config: OptimizerConfig,
    network: Network,
    dataset: Dataset,
    probe: Optional[LeashedProbe] = None,
) -> RunResult:
    """Dispatch to the loop selected by ``config.algo``."""
    if config.algo == "seq":
        return run_seq(config, network, dataset)
    if config.algo == "async":
        return run_async_lock(config, network, dataset)
    if config.algo == "hogwild":
        return run_hogwild(config, network, dataset)
    return run_leashed(config, network, dataset, probe=probe)
