"""Running account of span-internal fragmentation.

Tracks f, the bytes assigned to in-use real spans that are free but
unavailable to other size classes or LABs. The closed-form updates:

  allocation  - a call that had to fetch a span from the backend adds
                the new span's payload and subtracts the block size
                (f += u - size); any other allocation just consumes a
                free block (f -= size).
  deallocation - every free returns a block (f += size); if that free
                emptied the span and sent it back to the backend, the
                whole payload stops counting (f -= u).

At quiescence f equals the brute-force sum of free payload bytes over
all spans currently in the frontend; instrumented tests assert exact
equality after every operation in single-threaded runs.

The ledger only exists on instrumented allocators; otherwise the hooks
are never called. Updates are serialized by one event latch.
"""

import csv
import threading


class FragLedger:
    def __init__(self, log_events=True):
        self.f = 0
        self._lock = threading.Lock()
        self.events = [] if log_events else None

    def on_alloc(self, fetched_new_span, size, payload):
        with self._lock:
            if fetched_new_span:
                self.f += payload - size
                case = "new_span"
            else:
                self.f -= size
                case = "existing_span"
            if self.events is not None:
                self.events.append(("alloc", size, case))
        return self.f

    def on_free(self, span_reclaimed, size, payload):
        with self._lock:
            self.f += size
            case = "ordinary"
            if span_reclaimed:
                self.f -= payload
                case = "last_block"
            if self.events is not None:
                self.events.append(("free", size, case))
        return self.f

    def on_lazy_reclaim(self, payload):
        """Span returned to the backend from the allocation slow path
        (deferred-reclamation ablation)."""
        with self._lock:
            self.f -= payload
            if self.events is not None:
                self.events.append(("reclaim", payload, "lazy"))
        return self.f

    def dump_csv(self, fileobj):
        writer = csv.writer(fileobj)
        writer.writerow(["op", "size", "case"])
        for row in self.events or ():
            writer.writerow(row)
