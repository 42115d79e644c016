"""Allocation probe: self-reported transient-buffer accounting.

Attention paths report every transient buffer they create (label + size in
bytes) to a probe.  The probe tracks the set of concurrently-live buffers,
so tests and the CLI can assert the memory shape of each path: the fused
kernel's scratch is a few head-dim-sized arrays regardless of sequence
length, while the dequantize-then-attend baseline materializes two
``seq_len x head_dim`` float buffers.

This is bookkeeping, not interception: a path that allocates without
reporting is not caught.  Paths in this package report everything whose
size depends on their inputs.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

__all__ = ["BufferRecord", "AllocationProbe", "default_probe"]


@dataclass(frozen=True)
class BufferRecord:
    label: str
    nbytes: int


@dataclass
class AllocationProbe:
    """Thread-safe peak/record tracker for reported transient buffers."""

    records: list[BufferRecord] = field(default_factory=list)
    current_bytes: int = 0
    peak_bytes: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def reset(self) -> None:
        with self._lock:
            self.records.clear()
            self.current_bytes = 0
            self.peak_bytes = 0

    @contextmanager
    def transient(self, label: str, nbytes: int):
        """Scope during which a buffer of ``nbytes`` is considered live."""
        nbytes = int(nbytes)
        with self._lock:
            self.records.append(BufferRecord(label, nbytes))
            self.current_bytes += nbytes
            self.peak_bytes = max(self.peak_bytes, self.current_bytes)
        try:
            yield
        finally:
            with self._lock:
                self.current_bytes -= nbytes

    def largest_buffer(self) -> int:
        """Size of the largest single buffer reported so far (0 if none)."""
        with self._lock:
            return max((r.nbytes for r in self.records), default=0)


_default = AllocationProbe()


def default_probe() -> AllocationProbe:
    """Process-wide probe used when callers do not pass their own."""
    return _default
