"""Single-word atomics.

CPython threads interleave at bytecode granularity, so plain reads of an
attribute are atomic but read-modify-write sequences are not. AtomicWord
wraps one integer with the conditional-replace / exchange / fetch-add
primitives the allocator's lock-free protocols are written against. The
algorithms built on top follow the usual load / compute / conditional
replace discipline and retry on failure, exactly as they would against a
hardware CAS.
"""

import threading


class AtomicWord:
    __slots__ = ("_value", "_lock")

    def __init__(self, value=0):
        self._value = value
        self._lock = threading.Lock()

    def load(self):
        # Reading one attribute is atomic under the GIL.
        return self._value

    def store(self, value):
        with self._lock:
            self._value = value

    def compare_exchange(self, expected, new):
        """Replace the word with `new` iff it still equals `expected`."""
        with self._lock:
            if self._value != expected:
                return False
            self._value = new
            return True

    def exchange(self, new):
        """Swap in `new` unconditionally, returning the previous word."""
        with self._lock:
            old = self._value
            self._value = new
            return old

    def fetch_add(self, delta=1):
        """Add `delta`, returning the pre-increment value. Wait-free."""
        with self._lock:
            old = self._value
            self._value = old + delta
            return old

    def __repr__(self):
        return f"AtomicWord({self._value:#x})"
