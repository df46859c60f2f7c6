"""Virtual-memory providers.

The allocator core never talks to the operating system directly; it goes
through a provider that reserves address space, releases physical backing
(decommit), and optionally guards unused ranges. Two implementations:

* SimProvider - backs committed pages with bytearrays in a sparse page
  table and keeps exact accounting: committed bytes are precisely
  page_size times the number of pages written and not since decommitted.
  This is what makes memory-consumption claims assertable in tests.

* OsProvider - real anonymous mappings; decommit is madvise(DONTNEED),
  so the kernel reclaims the physical frames. Committed bytes are
  reported as the process resident set size (best effort, not
  range-exact). Benchmarks use this; tests use sim.

Addresses are plain integers assigned by the provider from a private
cursor, always 2MB-aligned for reservations and page-aligned for page
mappings. Address 0 is never handed out and doubles as the null
sentinel.
"""

import threading
from dataclasses import dataclass, field

from .config import PAGE_SIZE, VIRTUAL_SPAN_SIZE
from .errors import GuardViolation, ReservationError

# First address handed out; keeps 0 free for the null sentinel and makes
# accidental small-integer addresses stand out.
_BASE_CURSOR = 1 << 33


@dataclass
class VmRegion:
    base: int
    length: int
    page_size: int = PAGE_SIZE

    def __post_init__(self):
        assert self.base % VIRTUAL_SPAN_SIZE == 0
        assert self.length > 0 and self.length % VIRTUAL_SPAN_SIZE == 0

    @property
    def end(self):
        return self.base + self.length


@dataclass
class VmStats:
    committed_bytes: int = 0
    decommit_calls: int = 0
    reserve_calls: int = 0


class SimProvider:
    """Byte-array backed provider with exact page accounting.

    Pages commit on first write (reads of uncommitted pages return
    zeros without committing, mirroring on-demand zero pages). All
    bookkeeping mutations are serialized internally; data writes to
    already-committed pages rely on callers targeting disjoint ranges.
    """

    name = "sim"
    supports_guards = True

    def __init__(self, reservation_cap=1 << 46):
        self._lock = threading.Lock()
        self._cursor = _BASE_CURSOR
        self._cap = reservation_cap
        self._reserved = 0
        self._regions = []            # VmRegion, reservation order
        self._mappings = {}           # base -> length (page mappings)
        self._pages = {}              # page index -> bytearray(PAGE_SIZE)
        self._guards = set()          # guarded page indices
        self.stats = VmStats()
        self.map_calls = 0
        self.unmap_calls = 0
        self.peak_committed_bytes = 0
        self._window_peak = 0

    # -- reservation / mapping ------------------------------------------

    def reserve(self, length):
        if length <= 0 or length % VIRTUAL_SPAN_SIZE:
            raise ValueError("reservation must be a positive multiple of 2MB")
        with self._lock:
            if self._reserved + length > self._cap:
                raise ReservationError(
                    f"reservation of {length:#x} exceeds cap {self._cap:#x}")
            base = self._cursor
            self._cursor = base + length + VIRTUAL_SPAN_SIZE  # slack keeps regions disjoint
            self._reserved += length
            region = VmRegion(base, length)
            self._regions.append(region)
            self.stats.reserve_calls += 1
            return region

    def map_pages(self, length):
        """Reserve a standalone page-granular mapping (huge objects)."""
        if length <= 0 or length % PAGE_SIZE:
            raise ValueError("mapping must be a positive multiple of the page size")
        with self._lock:
            if self._reserved + length > self._cap:
                raise ReservationError("mapping exceeds reservation cap")
            base = self._cursor
            self._cursor = base + _round_up(length, VIRTUAL_SPAN_SIZE) \
                + VIRTUAL_SPAN_SIZE
            self._reserved += length
            self._mappings[base] = length
            self.map_calls += 1
            return base

    def unmap(self, base):
        """Drop a page mapping and all of its committed pages."""
        with self._lock:
            length = self._mappings.pop(base)
            self.unmap_calls += 1
            for idx in range(base // PAGE_SIZE, (base + length) // PAGE_SIZE):
                if self._pages.pop(idx, None) is not None:
                    self.stats.committed_bytes -= PAGE_SIZE
            self._reserved -= length

    def mapping_length(self, base):
        return self._mappings.get(base)

    # -- decommit / guards ----------------------------------------------

    def decommit(self, base, length):
        if base % PAGE_SIZE or length % PAGE_SIZE:
            raise ValueError("decommit range must be page-aligned")
        if not self._in_bounds(base, length):
            raise ValueError(f"decommit outside any reservation: {base:#x}+{length:#x}")
        with self._lock:
            self.stats.decommit_calls += 1
            pages = self._pages
            for idx in range(base // PAGE_SIZE, (base + length) // PAGE_SIZE):
                if pages.pop(idx, None) is not None:
                    self.stats.committed_bytes -= PAGE_SIZE

    def protect_guard(self, base, length, enable):
        if base % PAGE_SIZE or length % PAGE_SIZE:
            raise ValueError("guard range must be page-aligned")
        with self._lock:
            span = range(base // PAGE_SIZE, (base + length) // PAGE_SIZE)
            if enable:
                self._guards.update(span)
            else:
                self._guards.difference_update(span)
        return True

    def guarded_ranges(self):
        return set(self._guards)

    # -- data access ------------------------------------------------------

    def write(self, addr, data):
        n = len(data)
        pos = 0
        while pos < n:
            idx, off = divmod(addr + pos, PAGE_SIZE)
            take = min(PAGE_SIZE - off, n - pos)
            page = self._pages.get(idx)
            if page is None:
                page = self._commit_page(idx)
            page[off:off + take] = data[pos:pos + take]
            pos += take

    def read(self, addr, n):
        out = bytearray(n)
        pos = 0
        while pos < n:
            idx, off = divmod(addr + pos, PAGE_SIZE)
            take = min(PAGE_SIZE - off, n - pos)
            if self._guards and idx in self._guards:
                raise GuardViolation(f"read inside guarded page {idx:#x}")
            page = self._pages.get(idx)
            if page is not None:
                out[pos:pos + take] = page[off:off + take]
            pos += take
        return bytes(out)

    def write_word(self, addr, value):
        # Word writes are 8 bytes at 8-byte-aligned addresses, so they
        # never straddle a page boundary.
        idx = addr >> 12
        page = self._pages.get(idx)
        if page is None:
            page = self._commit_page(idx)
        off = addr & 0xFFF
        page[off:off + 8] = value.to_bytes(8, "little")

    def read_word(self, addr):
        page = self._pages.get(addr >> 12)
        if page is None:
            if self._guards and (addr >> 12) in self._guards:
                raise GuardViolation(f"read inside guarded page {addr >> 12:#x}")
            return 0
        off = addr & 0xFFF
        return int.from_bytes(page[off:off + 8], "little")

    def touch(self, addr, nbytes):
        """Commit every page overlapping [addr, addr+nbytes).

        Stands in for writes whose content lives elsewhere (span header
        fields), so the page accounting still sees them.
        """
        for idx in range(addr // PAGE_SIZE, -(-(addr + nbytes) // PAGE_SIZE)):
            if self._pages.get(idx) is None:
                self._commit_page(idx)

    def zero_committed(self, addr, nbytes):
        """Zero the committed portion of a range without committing more."""
        pos = 0
        while pos < nbytes:
            idx, off = divmod(addr + pos, PAGE_SIZE)
            take = min(PAGE_SIZE - off, nbytes - pos)
            page = self._pages.get(idx)
            if page is not None:
                page[off:off + take] = bytes(take)
            pos += take

    # -- accounting -------------------------------------------------------

    @property
    def committed_bytes(self):
        return self.stats.committed_bytes

    def committed_in(self, base, length):
        """Committed bytes inside [base, base+length), page-exact."""
        total = 0
        for idx in range(base // PAGE_SIZE, -(-(base + length) // PAGE_SIZE)):
            if idx in self._pages:
                total += PAGE_SIZE
        return total

    def committed_page_indices(self):
        """Shadow page-set oracle: every page currently backed."""
        return set(self._pages)

    def begin_window(self):
        with self._lock:
            self._window_peak = self.stats.committed_bytes

    @property
    def window_peak(self):
        return self._window_peak

    # -- internals --------------------------------------------------------

    def _commit_page(self, idx):
        with self._lock:
            page = self._pages.get(idx)
            if page is not None:
                return page
            if self._guards and idx in self._guards:
                raise GuardViolation(f"write inside guarded page {idx:#x}")
            base = idx * PAGE_SIZE
            if not self._in_bounds(base, PAGE_SIZE):
                raise ValueError(f"write outside any reservation: {base:#x}")
            page = bytearray(PAGE_SIZE)
            self._pages[idx] = page
            committed = self.stats.committed_bytes + PAGE_SIZE
            self.stats.committed_bytes = committed
            if committed > self.peak_committed_bytes:
                self.peak_committed_bytes = committed
            if committed > self._window_peak:
                self._window_peak = committed
            return page

    def _in_bounds(self, base, length):
        end = base + length
        for region in self._regions:
            if region.base <= base and end <= region.end:
                return True
        for mbase, mlen in self._mappings.items():
            if mbase <= base and end <= mbase + mlen:
                return True
        return False


class OsProvider:
    """Real anonymous mappings; decommit is madvise(MADV_DONTNEED).

    Committed-bytes reporting is the process RSS (page-granular but
    process-wide); tests that need range-exact accounting use sim.
    Guard pages are unsupported and reported once.
    """

    name = "os"
    supports_guards = False

    def __init__(self, reservation_cap=1 << 46):
        import mmap as _mmap
        self._mmap = _mmap
        self._lock = threading.Lock()
        self._cursor = _BASE_CURSOR
        self._cap = reservation_cap
        self._reserved = 0
        self._maps = []               # (base, length, mmap) sorted by base
        self.stats = VmStats()
        self.map_calls = 0
        self.unmap_calls = 0
        self.peak_committed_bytes = 0
        self._window_peak = 0
        self._guard_warned = False

    def reserve(self, length):
        if length <= 0 or length % VIRTUAL_SPAN_SIZE:
            raise ValueError("reservation must be a positive multiple of 2MB")
        mm = self._map(length)
        with self._lock:
            base = self._cursor
            self._cursor = base + length + VIRTUAL_SPAN_SIZE
            self._maps.append((base, length, mm))
            self.stats.reserve_calls += 1
        return VmRegion(base, length)

    def map_pages(self, length):
        if length <= 0 or length % PAGE_SIZE:
            raise ValueError("mapping must be a positive multiple of the page size")
        mm = self._map(length)
        with self._lock:
            base = self._cursor
            self._cursor = base + _round_up(length, VIRTUAL_SPAN_SIZE) \
                + VIRTUAL_SPAN_SIZE
            self._maps.append((base, length, mm))
            self.map_calls += 1
        return base

    def _map(self, length):
        try:
            with self._lock:
                if self._reserved + length > self._cap:
                    raise ReservationError("mapping exceeds reservation cap")
                self._reserved += length
            return self._mmap.mmap(-1, length)
        except (OSError, OverflowError) as exc:
            raise ReservationError(f"OS refused mapping of {length:#x}: {exc}") from exc

    def unmap(self, base):
        with self._lock:
            for i, (mbase, mlen, mm) in enumerate(self._maps):
                if mbase == base:
                    del self._maps[i]
                    self._reserved -= mlen
                    self.unmap_calls += 1
                    mm.close()
                    return
        raise ValueError(f"unmap of unknown mapping {base:#x}")

    def mapping_length(self, base):
        for mbase, mlen, _ in self._maps:
            if mbase == base:
                return mlen
        return None

    def decommit(self, base, length):
        if base % PAGE_SIZE or length % PAGE_SIZE:
            raise ValueError("decommit range must be page-aligned")
        mbase, _, mm = self._locate(base, length)
        self.stats.decommit_calls += 1
        if hasattr(mm, "madvise"):
            mm.madvise(self._mmap.MADV_DONTNEED, base - mbase, length)

    def protect_guard(self, base, length, enable):
        if not self._guard_warned:
            self._guard_warned = True
            import warnings
            warnings.warn("guard pages unsupported on the os provider; disabled")
        return False

    def write(self, addr, data):
        mbase, _, mm = self._locate(addr, len(data))
        off = addr - mbase
        mm[off:off + len(data)] = data

    def read(self, addr, n):
        mbase, _, mm = self._locate(addr, n)
        off = addr - mbase
        return bytes(mm[off:off + n])

    def write_word(self, addr, value):
        self.write(addr, value.to_bytes(8, "little"))

    def read_word(self, addr):
        return int.from_bytes(self.read(addr, 8), "little")

    def touch(self, addr, nbytes):
        # Writing zeros is enough to fault the pages in.
        self.write(addr, bytes(nbytes))

    def zero_committed(self, addr, nbytes):
        self.write(addr, bytes(nbytes))

    @property
    def committed_bytes(self):
        rss = _process_rss_bytes()
        if rss > self.peak_committed_bytes:
            self.peak_committed_bytes = rss
        if rss > self._window_peak:
            self._window_peak = rss
        return rss

    def committed_in(self, base, length):
        raise NotImplementedError("range-exact accounting needs the sim provider")

    def begin_window(self):
        self._window_peak = self.committed_bytes

    @property
    def window_peak(self):
        return self._window_peak

    def _locate(self, addr, n):
        for mbase, mlen, mm in self._maps:
            if mbase <= addr and addr + n <= mbase + mlen:
                return mbase, mlen, mm
        raise ValueError(f"address {addr:#x} outside any mapping")


def _round_up(value, step):
    return -(-value // step) * step


def _process_rss_bytes():
    try:
        with open("/proc/self/statm") as fh:
            return int(fh.read().split()[1]) * PAGE_SIZE
    except (OSError, IndexError, ValueError):
        return 0


def make_provider(config):
    if config.provider == "os":
        return OsProvider(reservation_cap=config.reservation_cap)
    return SimProvider(reservation_cap=config.reservation_cap)
