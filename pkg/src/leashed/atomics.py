"""Single-word atomic primitives backed by per-cell locks.

CPython's interpreter lock already makes every operation here sequentially
consistent; the per-cell locks exist to make read-modify-write sequences
(fetch-and-add, compare-and-swap) indivisible, which the interpreter alone
does not guarantee.  All operations are therefore at least as strong as the
seq-cst / release-acquire mix the algorithms in this package assume.
"""

from __future__ import annotations

import threading
from typing import Generic, Optional, TypeVar

T = TypeVar("T")


class AtomicInt:
    """Integer cell with atomic load/store/FAA/CAS."""

    __slots__ = ("_value", "_lock")

    def __init__(self, initial: int = 0) -> None:
        self._value = initial
        self._lock = threading.Lock()

    def load(self) -> int:
        with self._lock:
            return self._value

    def store(self, value: int) -> None:
        with self._lock:
            self._value = value

    def fetch_add(self, delta: int) -> int:
        """Add ``delta`` and return the value held *before* the addition."""
        with self._lock:
            old = self._value
            self._value = old + delta
            return old

    def compare_and_swap(self, expected: int, desired: int) -> bool:
        with self._lock:
            if self._value == expected:
                self._value = desired
                return True
            return False

    @property
    def value(self) -> int:
        return self.load()

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"AtomicInt({self.load()})"


class AtomicBool:
    """Boolean cell with atomic load/store/CAS."""

    __slots__ = ("_value", "_lock")

    def __init__(self, initial: bool = False) -> None:
        self._value = bool(initial)
        self._lock = threading.Lock()

    def load(self) -> bool:
        with self._lock:
            return self._value

    def store(self, value: bool) -> None:
        with self._lock:
            self._value = bool(value)

    def compare_and_swap(self, expected: bool, desired: bool) -> bool:
        with self._lock:
            if self._value == expected:
                self._value = desired
                return True
            return False

    @property
    def value(self) -> bool:
        return self.load()

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"AtomicBool({self.load()})"


class AtomicRef(Generic[T]):
    """Object-reference cell; CAS compares by identity, like a pointer word."""

    __slots__ = ("_value", "_lock")

    def __init__(self, initial: Optional[T] = None) -> None:
        self._value: Optional[T] = initial
        self._lock = threading.Lock()

    def load(self) -> Optional[T]:
        with self._lock:
            return self._value

    def store(self, value: Optional[T]) -> None:
        with self._lock:
            self._value = value

    def compare_and_swap(self, expected: Optional[T], desired: Optional[T]) -> bool:
        with self._lock:
            if self._value is expected:
                self._value = desired
                return True
            return False

    @property
    def value(self) -> Optional[T]:
        return self.load()
