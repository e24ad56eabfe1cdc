"""Shared versioned parameter object with reader tracking and payload recycling.

A :class:`ParameterVector` couples a dense parameter payload ``theta`` with a
small atomic metadata header: a sequence number ``t``, an active-reader count
``n_rdrs``, a ``stale_flag`` set once the version has been superseded, and a
``deleted`` flag that guards payload reclamation behind a compare-and-swap so
that each payload is recycled at most once.

The reclamation handshake is asymmetric on purpose:

* readers *register* (increment ``n_rdrs``) and only then check ``stale_flag``;
* reclaimers set ``stale_flag`` and only then check ``n_rdrs``.

Under sequentially consistent metadata operations (see :mod:`leashed.atomics`)
these two orderings cannot both miss each other, so a payload is recycled only
when no registered reader can still dereference it.  Headers are never
recycled during a run: every instance stays registered with its
:class:`PayloadPool` until the pool itself is dropped, so late metadata reads
on a reclaimed version are always well defined.

Payload buffers go back to a per-size free list on reclamation and are handed
out again (zeroed) by subsequent allocations.
"""

from __future__ import annotations

import threading
import time
from typing import Iterator, Optional

import numpy as np

from .atomics import AtomicBool, AtomicInt


class ParameterVector:
    """One version of the flattened model parameters plus its atomic header.

    Instances are created through :meth:`PayloadPool.new_param_vector`; the
    pool reference is what allows :meth:`safe_delete` to recycle the payload.
    """

    __slots__ = (
        "d",
        "_payload",
        "t",
        "n_rdrs",
        "stale_flag",
        "deleted",
        "reclaim_count",
        "reclaim_ns",
        "_pool",
    )

    def __init__(self, payload: np.ndarray, pool: "PayloadPool") -> None:
        self.d = int(payload.shape[0])
        self._payload: Optional[np.ndarray] = payload
        self.t = AtomicInt(0)
        self.n_rdrs = AtomicInt(0)
        self.stale_flag = AtomicBool(False)
        self.deleted = AtomicBool(False)
        # Written only by the thread that wins the `deleted` CAS.
        self.reclaim_count = 0
        self.reclaim_ns: Optional[int] = None
        self._pool = pool

    # -- payload access -----------------------------------------------------

    @property
    def theta(self) -> np.ndarray:
        """The parameter payload; raises if it has already been recycled."""
        payload = self._payload
        if payload is None:
            raise RuntimeError("payload dereferenced after reclamation")
        return payload

    def payload_or_none(self) -> Optional[np.ndarray]:
        """Raw payload reference for instrumentation; ``None`` once recycled."""
        return self._payload

    # -- Algorithm surface ----------------------------------------------------

    def rand_init(self, seed: int) -> None:
        """Fill theta with independent draws from N(0, sd=0.01)."""
        rng = np.random.default_rng(seed)
        self.theta[:] = rng.normal(0.0, 0.01, self.d)

    def start_reading(self) -> None:
        self.n_rdrs.fetch_add(1)

    def stop_reading(self) -> None:
        self.n_rdrs.fetch_add(-1)
        self.safe_delete()

    def safe_delete(self) -> bool:
        """Recycle the payload iff stale, reader-free, and not already done.

        Returns True only for the single call that performed the reclamation.
        The conjunction is evaluated as three separate atomic reads; safety
        comes from the register-then-check / flag-then-check handshake
        described in the module docstring, not from the conjunction itself.
        """
        if (
            self.stale_flag.load()
            and self.n_rdrs.load() == 0
            and self.deleted.compare_and_swap(False, True)
        ):
            payload = self._payload
            self._payload = None
            self.reclaim_count += 1
            self.reclaim_ns = time.monotonic_ns()
            if payload is not None:
                self._pool._recycle(payload)
            return True
        return False

    def update(self, delta: np.ndarray, eta: float) -> int:
        """Apply one SGD step ``theta -= eta * delta`` and bump the sequence.

        Returns the post-increment sequence number.  The sequence number is
        advanced before the payload writes, matching the publish discipline
        of the owning optimizers (the caller guarantees exclusive or
        race-tolerant payload access).
        """
        if delta.shape[0] != self.d:
            raise ValueError(
                f"gradient length {delta.shape[0]} does not match dimension {self.d}"
            )
        seq = self.t.fetch_add(1) + 1
        theta = self.theta
        step = np.multiply(delta, theta.dtype.type(eta), dtype=theta.dtype)
        theta -= step
        return seq

    def update_sparse(self, delta: np.ndarray, eta: float) -> int:
        """Race-tolerant step that writes only components where delta != 0.

        Used by the synchronization-free optimizer: concurrent updates with
        disjoint supports touch disjoint elements and therefore commute
        exactly, and a single element is never torn (element stores are
        word-sized and aligned).
        """
        if delta.shape[0] != self.d:
            raise ValueError(
                f"gradient length {delta.shape[0]} does not match dimension {self.d}"
            )
        seq = self.t.fetch_add(1) + 1
        theta = self.theta
        idx = np.flatnonzero(delta)
        step = np.multiply(delta[idx], theta.dtype.type(eta), dtype=theta.dtype)
        theta[idx] -= step
        return seq


class VersionSlot:
    """Single shared word holding the latest published :class:`ParameterVector`.

    Mutated only through :meth:`try_install` (compare-and-swap by identity),
    so successful installs are totally ordered; each installed version carries
    a sequence number one above its predecessor's.
    """

    __slots__ = ("_latest", "_lock", "install_log")

    def __init__(self, initial: ParameterVector) -> None:
        self._latest = initial
        self._lock = threading.Lock()
        # When set to a list, successful installs append their sequence
        # number in install order (used by the verification suite).
        self.install_log: Optional[list] = None

    def load(self) -> ParameterVector:
        with self._lock:
            return self._latest

    def try_install(self, expected: ParameterVector, new: ParameterVector) -> bool:
        with self._lock:
            if self._latest is not expected:
                return False
            self._latest = new
            if self.install_log is not None:
                self.install_log.append(new.t.load())
            return True

    def acquire_latest(self) -> ParameterVector:
        """Return a registered handle to a version observed non-stale.

        Registration happens before the staleness check, so a false
        ``stale_flag`` means the reclamation handshake is guaranteed to see
        this reader.  A stale observation releases the handle and retries;
        every retry implies some other thread published, so the loop is
        lock-free.
        """
        while True:
            pv = self.load()
            pv.start_reading()
            if not pv.stale_flag.load():
                return pv
            pv.stop_reading()


class PayloadPool:
    """Run-scoped payload allocator with a census of live payloads.

    Reclaimed buffers land on a per-size free list and are zeroed when reused.
    The census counters are maintained under one lock, so at any sample
    ``live_payloads == alloc_total - reclaim_total`` holds by construction;
    when ``census=True`` every allocation and reclamation also appends a
    ``(wall_ns, live_payloads, live_bytes)`` sample for offline inspection.
    """

    def __init__(self, dtype: np.dtype = np.float32, census: bool = False) -> None:
        self.dtype = np.dtype(dtype)
        self.census_enabled = census
        self._lock = threading.Lock()
        self._free: dict[int, list[np.ndarray]] = {}
        self.alloc_total = 0
        self.reclaim_total = 0
        self.live_payloads = 0
        self.live_bytes = 0
        self.peak_live_payloads = 0
        self.events: list[tuple[int, int, int]] = []
        self.instances: list[ParameterVector] = []
        self._epoch_ns = time.monotonic_ns()

    def set_epoch(self, epoch_ns: int) -> None:
        """Anchor census timestamps to the owning run's start time."""
        self._epoch_ns = epoch_ns

    def new_param_vector(self, d: int) -> ParameterVector:
        """Allocate a zeroed d-dimensional version (fresh or recycled buffer)."""
        if d < 1:
            raise ValueError(f"dimension must be >= 1, got {d}")
        with self._lock:
            stack = self._free.get(d)
            buf = stack.pop() if stack else None
        if buf is None:
            buf = np.zeros(d, dtype=self.dtype)
        else:
            buf[:] = 0
        pv = ParameterVector(buf, self)
        with self._lock:
            self.alloc_total += 1
            self.live_payloads += 1
            self.live_bytes += buf.nbytes
            if self.live_payloads > self.peak_live_payloads:
                self.peak_live_payloads = self.live_payloads
            self.instances.append(pv)
            if self.census_enabled:
                self.events.append(
                    (
                        time.monotonic_ns() - self._epoch_ns,
                        self.live_payloads,
                        self.live_bytes,
                    )
                )
        return pv

    def _recycle(self, buf: np.ndarray) -> None:
        with self._lock:
            self._free.setdefault(buf.shape[0], []).append(buf)
            self.reclaim_total += 1
            self.live_payloads -= 1
            self.live_bytes -= buf.nbytes
            if self.census_enabled:
                self.events.append(
                    (
                        time.monotonic_ns() - self._epoch_ns,
                        self.live_payloads,
                        self.live_bytes,
                    )
                )

    def sample(self) -> tuple[int, int, int]:
        """(wall_ns, live_payloads, live_bytes) snapshot under the pool lock."""
        with self._lock:
            return (
                time.monotonic_ns() - self._epoch_ns,
                self.live_payloads,
                self.live_bytes,
            )

    def iter_instances(self) -> Iterator[ParameterVector]:
        with self._lock:
            snapshot = list(self.instances)
        return iter(snapshot)
