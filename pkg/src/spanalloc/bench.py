"""Batch benchmark harness and CLI.

Reproduces the classic allocator workload families at desk scale and
writes one CSV row per run: throughput, peak committed memory (exact
under the sim provider, sampled RSS under os), per-thread allocator
time, and the ablation flags in effect.

Workloads:
  threadtest        rounds of allocate-all / free-all per thread
  shbench_like      batches of 1-8 byte objects living 1-4 rounds
  larson_like       object sets handed to freshly spawned threads,
                    terminating the hander's thread each time
  prodcons          producer/consumer exchange through queues; with
                    symmetric roles every object is freed by a
                    uniformly random thread (remote-free probability
                    1 - 1/n)
  sizesweep         ramp over object-size intervals [2^x, 2^(x+2)),
                    crossing into the huge path at the top
  falseshare_active two threads allocate concurrently; reports whether
                    any span was shared
  falseshare_passive remote-frees a block and reports whether the freeing
                    thread gets it back on its next allocation
  locality          list-order vs tree-order access sweep over touched
                    objects, wall time only
"""

import argparse
import csv
import os
import random
import sys
import threading
import time
from dataclasses import dataclass, field, replace

from .api import NULL, Allocator
from .config import AllocatorConfig
from .errors import SpanAllocError
from .size_classes import dump_csv

ABLATION_FLAGS = ("no_decommit", "pool_width_1", "lazy_reclaim")

WORKLOADS = (
    "threadtest", "shbench_like", "larson_like", "prodcons",
    "sizesweep", "falseshare_active", "falseshare_passive", "locality",
)

_RSS_SAMPLE_PERIOD = 0.010


@dataclass
class WorkloadConfig:
    name: str
    threads: int = 1
    rounds: int = 10
    objects_per_round: int | None = None
    object_size: int = 64
    size_range: tuple[int, int] | None = None
    duration: float | None = None
    handoffs: int = 8
    producers: int | None = None          # prodcons role split; None = symmetric
    seed: int = 0
    touch_objects: bool = True

    def __post_init__(self):
        if self.name not in WORKLOADS:
            raise ValueError(f"unknown workload {self.name!r}")
        if self.threads < 1 or self.rounds < 0:
            raise ValueError("threads must be >= 1 and rounds >= 0")

    def objects(self):
        if self.objects_per_round is not None:
            return self.objects_per_round
        # Desk-scale default mirroring the classic configuration shape:
        # the per-round object count splits across threads.
        return max(1, 100_000 // self.threads)


@dataclass
class RunReport:
    workload: str
    threads: int
    ops: int
    elapsed_s: float
    ops_per_second: float
    peak_committed_bytes: int
    thread_alloc_times_s: list[float]
    ablation: dict
    config: WorkloadConfig
    extra: dict = field(default_factory=dict)

    CSV_COLUMNS = [
        "workload", "threads", "rounds", "objects_per_round", "object_size",
        "size_min", "size_max", "seed", "provider", "pool_width",
        "reuse_percent", "lab_mode", "ablation", "ops", "elapsed_s",
        "ops_per_sec", "peak_committed_bytes", "thread_alloc_time_mean_s",
        "remote_free_fraction", "pool_puts", "pool_gets",
        "stack_pushes", "stack_pops", "stack_retries",
    ]

    def csv_row(self, alloc_config):
        times = self.thread_alloc_times_s
        mean_time = sum(times) / len(times) if times else 0.0
        size_min, size_max = self.config.size_range or ("", "")
        flags = "+".join(k for k, v in self.ablation.items() if v) or "none"
        return {
            "workload": self.workload,
            "threads": self.threads,
            "rounds": self.config.rounds,
            "objects_per_round": self.config.objects(),
            "object_size": self.config.object_size,
            "size_min": size_min,
            "size_max": size_max,
            "seed": self.config.seed,
            "provider": alloc_config.provider,
            "pool_width": alloc_config.effective_pool_width(),
            "reuse_percent": alloc_config.reuse_percent,
            "lab_mode": alloc_config.lab_mode,
            "ablation": flags,
            "ops": self.ops,
            "elapsed_s": round(self.elapsed_s, 6),
            "ops_per_sec": round(self.ops_per_second, 1),
            "peak_committed_bytes": self.peak_committed_bytes,
            "thread_alloc_time_mean_s": round(mean_time, 6),
            "remote_free_fraction": round(
                self.extra.get("remote_free_fraction", 0.0), 4),
            "pool_puts": self.extra.get("pool_puts", 0),
            "pool_gets": self.extra.get("pool_gets", 0),
            "stack_pushes": self.extra.get("stack_pushes", 0),
            "stack_pops": self.extra.get("stack_pops", 0),
            "stack_retries": self.extra.get("stack_retries", 0),
        }


def ablate(flags=(), base_config=None, **overrides):
    """Allocator configured with the named ablations applied.

    no_decommit disables the pooled-span decommit, pool_width_1 funnels
    every thread onto one stack per real-span size, lazy_reclaim defers
    empty-span returns to the next slow-path allocation.
    """
    unknown = set(flags) - set(ABLATION_FLAGS)
    if unknown:
        raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
    config = base_config or AllocatorConfig()
    if overrides:
        config = replace(config, **overrides)
    if "no_decommit" in flags:
        config = replace(config, decommit_enabled=False)
    if "pool_width_1" in flags:
        config = replace(config, pool_width=1)
    if "lazy_reclaim" in flags:
        config = replace(config, eager_reclaim=False)
    return Allocator(config)


def ablation_of(allocator):
    c = allocator.config
    return {
        "no_decommit": not c.decommit_enabled,
        "pool_width_1": c.effective_pool_width() == 1,
        "lazy_reclaim": not c.eager_reclaim,
    }


class _Worker(threading.Thread):
    """Workload thread that accounts time spent inside the allocator."""

    def __init__(self, allocator, body, index):
        super().__init__(name=f"bench-{index}")
        self.allocator = allocator
        self.body = body
        self.index = index
        self.alloc_time = 0.0
        self.error = None

    def timed(self, fn, *args):
        t0 = time.perf_counter()
        result = fn(*args)
        self.alloc_time += time.perf_counter() - t0
        return result

    def run(self):
        try:
            self.allocator.attach_thread()
            try:
                self.body(self)
            finally:
                self.allocator.detach_thread()
        except BaseException as exc:   # surfaced after join
            self.error = exc


class _RssSampler(threading.Thread):
    def __init__(self, provider):
        super().__init__(daemon=True)
        self.provider = provider
        self.peak = 0
        self._halt = threading.Event()   # must not shadow Thread._stop

    def run(self):
        while not self._halt.is_set():
            self.peak = max(self.peak, self.provider.committed_bytes)
            self._halt.wait(_RSS_SAMPLE_PERIOD)

    def stop(self):
        self._halt.set()
        self.join()


def run(config, allocator=None):
    """Execute a workload; returns the RunReport."""
    own = allocator is None
    if own:
        allocator = Allocator(AllocatorConfig.from_env())
    provider = allocator.provider
    sim = provider.name == "sim"
    sampler = None
    if sim:
        provider.begin_window()
    else:
        sampler = _RssSampler(provider)
        sampler.start()

    runner = _WORKLOAD_RUNNERS[config.name]
    started = time.perf_counter()
    workers, extra = runner(allocator, config)
    elapsed = time.perf_counter() - started

    if sampler is not None:
        sampler.stop()
        peak = sampler.peak
    else:
        peak = provider.window_peak

    stats = allocator.stats()
    ops = stats["allocs"] + stats["frees"]
    extra.setdefault("remote_free_fraction", stats["remote_free_fraction"])
    extra["pool_puts"] = stats["pool_puts"]
    extra["pool_gets"] = stats["pool_gets"]
    extra["stack_pushes"] = stats["stack_pushes"]
    extra["stack_pops"] = stats["stack_pops"]
    extra["stack_retries"] = stats["stack_retries"]
    extra["leaked_blocks"] = stats["allocs"] - stats["frees"]

    return RunReport(
        workload=config.name,
        threads=config.threads,
        ops=ops,
        elapsed_s=elapsed,
        ops_per_second=ops / elapsed if elapsed > 0 else 0.0,
        peak_committed_bytes=peak,
        thread_alloc_times_s=[w.alloc_time for w in workers],
        ablation=ablation_of(allocator),
        config=config,
        extra=extra,
    )


def _spawn(allocator, bodies):
    workers = [_Worker(allocator, body, i) for i, body in enumerate(bodies)]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    for w in workers:
        if w.error is not None:
            raise w.error
    return workers


def _touch(provider, addr, size):
    provider.write_word(addr, (addr ^ size) & ((1 << 64) - 1))


# -- threadtest ---------------------------------------------------------------

def _run_threadtest(allocator, config):
    objects = config.objects()
    size = config.object_size
    provider = allocator.provider
    touch = config.touch_objects

    def body(worker):
        malloc, free = allocator.malloc, allocator.free
        for _ in range(config.rounds):
            t0 = time.perf_counter()
            ptrs = [malloc(size) for _ in range(objects)]
            if touch:
                for p in ptrs:
                    _touch(provider, p, size)
            for p in ptrs:
                free(p)
            worker.alloc_time += time.perf_counter() - t0

    return _spawn(allocator, [body] * config.threads), {}


# -- shbench-like --------------------------------------------------------------

def _run_shbench(allocator, config):
    objects = config.objects()
    lo, hi = config.size_range or (1, 8)
    provider = allocator.provider

    def body(worker):
        rng = random.Random(config.seed + worker.index)
        malloc, free = allocator.malloc, allocator.free
        pending = {}     # expiry round -> [ptr]
        for r in range(config.rounds):
            t0 = time.perf_counter()
            for p in pending.pop(r, ()):
                free(p)
            for _ in range(objects):
                p = malloc(rng.randint(lo, hi))
                if config.touch_objects:
                    _touch(provider, p, 8)
                pending.setdefault(r + rng.randint(1, 4), []).append(p)
            worker.alloc_time += time.perf_counter() - t0
        for batch in pending.values():
            for p in batch:
                free(p)

    return _spawn(allocator, [body] * config.threads), {}


# -- larson-like ----------------------------------------------------------------

def _run_larson(allocator, config):
    """Chains of short-lived threads passing object sets along.

    Each link mutates its set (random free + fresh allocation) for the
    configured rounds, hands the set to a newly spawned thread, and
    terminates. The final link frees everything.
    """
    objects = config.objects()
    lo, hi = config.size_range or (7, 8)
    results = []
    results_lock = threading.Lock()
    deadline = time.monotonic() + config.duration if config.duration else None

    def link_body(chain, slots, handoffs_left, rng):
        def body(worker):
            malloc, free = allocator.malloc, allocator.free
            t0 = time.perf_counter()
            for _ in range(config.rounds):
                i = rng.randrange(len(slots))
                free(slots[i])
                slots[i] = malloc(rng.randint(lo, hi))
            worker.alloc_time += time.perf_counter() - t0
            expired = deadline is not None and time.monotonic() >= deadline
            if handoffs_left > 0 and not expired:
                nxt = _Worker(allocator,
                              link_body(chain, slots, handoffs_left - 1, rng),
                              worker.index)
                nxt.start()
                with results_lock:
                    results.append(nxt)
            else:
                for p in slots:
                    free(p)
        return body

    def seed_body(chain):
        def body(worker):
            rng = random.Random(config.seed + chain)
            slots = [allocator.malloc(rng.randint(lo, hi))
                     for _ in range(objects)]
            link_body(chain, slots, config.handoffs, rng)(worker)
        return body

    workers = _spawn(allocator, [seed_body(c) for c in range(config.threads)])
    # Join spawned continuation threads; joining one may reveal more.
    while True:
        with results_lock:
            snapshot = list(results)
        for w in snapshot:
            w.join()
            if w.error is not None:
                raise w.error
        with results_lock:
            done = len(results) == len(snapshot)
        if done:
            break
    return workers + snapshot, {}


# -- producer/consumer ------------------------------------------------------------

def _run_prodcons(allocator, config):
    """Objects cross threads through queues; frees are remote.

    Symmetric mode (producers=None): every thread allocates a batch per
    epoch and routes each object to a uniformly random thread's inbox,
    so remote-free probability is 1 - 1/n. Split mode: the first
    `producers` threads allocate, the rest only free. An epoch barrier
    keeps queues drained.
    """
    import queue

    n = config.threads
    producers = config.producers
    symmetric = producers is None
    objects = config.objects()
    size = config.object_size
    inboxes = [queue.SimpleQueue() for _ in range(n)]
    barrier = threading.Barrier(n)
    epoch_peaks = []
    provider = allocator.provider
    sim = provider.name == "sim"
    n_producers = n if symmetric else producers
    first_consumer = 0 if symmetric else producers
    n_consumers = n if symmetric else n - producers

    def drain(worker, inbox):
        # Routing is random, so the count per inbox is not fixed; each
        # producer ends its epoch with one sentinel per inbox.
        free = allocator.free
        done = 0
        while done < n_producers:
            p = inbox.get()
            if p is None:
                done += 1
                continue
            t0 = time.perf_counter()
            free(p)
            worker.alloc_time += time.perf_counter() - t0

    def body(worker):
        rng = random.Random(config.seed + worker.index)
        malloc = allocator.malloc
        i = worker.index
        is_producer = symmetric or i < producers
        is_consumer = symmetric or i >= producers
        for epoch in range(config.rounds):
            if sim and i == 0:
                provider.begin_window()
            barrier.wait()
            if is_producer:
                for _ in range(objects):
                    t0 = time.perf_counter()
                    p = malloc(size if not config.size_range
                               else rng.randint(*config.size_range))
                    worker.alloc_time += time.perf_counter() - t0
                    if config.touch_objects:
                        _touch(provider, p, size)
                    inboxes[first_consumer + rng.randrange(n_consumers)].put(p)
                for c in range(n_consumers):
                    inboxes[first_consumer + c].put(None)
            if is_consumer:
                drain(worker, inboxes[i])
            barrier.wait()
            if sim and i == 0:
                epoch_peaks.append(provider.window_peak)

    workers = _spawn(allocator, [body] * n)
    return workers, {"epoch_peaks": epoch_peaks}


# -- object-size sweep -------------------------------------------------------------

SIZESWEEP_EXPONENTS = range(4, 21, 2)


def _run_sizesweep(allocator, config):
    """Per interval [2^x, 2^(x+2)), cycles of allocate/touch/free with
    roughly 2^x KB of new objects per cycle, scaled down."""
    provider = allocator.provider
    interval_times = {}

    def body(worker):
        rng = random.Random(config.seed + worker.index)
        malloc, free = allocator.malloc, allocator.free
        for x in SIZESWEEP_EXPONENTS:
            lo, hi = 1 << x, 1 << (x + 2)
            budget = (1 << x) * 1024 // 64       # bytes per cycle, scaled
            t0 = time.perf_counter()
            prev = []
            for _ in range(config.rounds):
                batch = []
                allocated = 0
                while allocated < budget:
                    s = rng.randrange(lo, hi)
                    p = malloc(s)
                    if p == NULL:
                        raise SpanAllocError("sizesweep hit out-of-memory")
                    if config.touch_objects:
                        _touch(provider, p, s)
                    batch.append(p)
                    allocated += s
                for p in prev:
                    free(p)
                prev = batch
            for p in prev:
                free(p)
            dt = time.perf_counter() - t0
            worker.alloc_time += dt
            interval_times.setdefault(x, []).append(dt)

    workers = _spawn(allocator, [body] * config.threads)
    return workers, {"interval_times": interval_times}


# -- false sharing probes -------------------------------------------------------------

def _span_base(allocator, addr):
    return allocator.arena.owning_span_base(addr)


def _run_falseshare_active(allocator, config):
    """Two or more threads allocate with no frees; spans must stay
    private to their allocating thread."""
    objects = config.objects()
    size = config.object_size
    per_thread_spans = [set() for _ in range(config.threads)]
    ptrs = [[] for _ in range(config.threads)]
    barrier = threading.Barrier(config.threads)

    def body(worker):
        barrier.wait()
        t0 = time.perf_counter()
        for _ in range(objects):
            p = allocator.malloc(size)
            ptrs[worker.index].append(p)
            per_thread_spans[worker.index].add(_span_base(allocator, p))
        worker.alloc_time += time.perf_counter() - t0

    workers = _spawn(allocator, [body] * config.threads)
    shared = set()
    for i in range(config.threads):
        for j in range(i + 1, config.threads):
            shared |= per_thread_spans[i] & per_thread_spans[j]
    for batch in ptrs:
        for p in batch:
            allocator.free(p)
    return workers, {"spans_shared": len(shared), "probe_ok": not shared}


def _run_falseshare_passive(allocator, config):
    """Thread A allocates, thread B frees one of A's blocks remotely;
    B's next allocations must not return that block."""
    size = config.object_size
    objects = max(2, config.objects())
    handoff = []
    got_back = []

    def body_a(worker):
        ptrs = [allocator.malloc(size) for _ in range(objects)]
        handoff.append(ptrs)

    def body_b(worker):
        while not handoff:
            time.sleep(0.001)
        ptrs = handoff[0]
        victim = ptrs[len(ptrs) // 2]
        allocator.free(victim)
        mine = [allocator.malloc(size) for _ in range(objects)]
        got_back.append(victim in mine)
        for p in mine:
            allocator.free(p)

    workers = _spawn(allocator, [body_a, body_b])
    for i, p in enumerate(handoff[0]):
        if i != len(handoff[0]) // 2:
            allocator.free(p)
    return workers, {"probe_ok": not got_back[0],
                     "victim_returned": got_back[0]}


# -- locality -----------------------------------------------------------------------

def _run_locality(allocator, config):
    """Access objects in allocation order (lists) vs shuffled order
    (trees), sweeping the list ratio; reports access wall times."""
    objects = config.objects()
    lo, hi = config.size_range or (16, 32)
    provider = allocator.provider
    access_times = {}

    def body(worker):
        rng = random.Random(config.seed + worker.index)
        ptrs = [allocator.malloc(rng.randint(lo, hi)) for _ in range(objects)]
        for p in ptrs:
            _touch(provider, p, 16)
        shuffled = list(ptrs)
        rng.shuffle(shuffled)
        for ratio in (0, 25, 50, 75, 100):
            cut = objects * ratio // 100
            order = ptrs[:cut] + shuffled[cut:]
            t0 = time.perf_counter()
            for _ in range(max(1, config.rounds)):
                for p in order:
                    provider.read_word(p)
            access_times.setdefault(ratio, []).append(
                time.perf_counter() - t0)
        for p in ptrs:
            allocator.free(p)

    workers = _spawn(allocator, [body] * config.threads)
    return workers, {"access_times": access_times}


_WORKLOAD_RUNNERS = {
    "threadtest": _run_threadtest,
    "shbench_like": _run_shbench,
    "larson_like": _run_larson,
    "prodcons": _run_prodcons,
    "sizesweep": _run_sizesweep,
    "falseshare_active": _run_falseshare_active,
    "falseshare_passive": _run_falseshare_passive,
    "locality": _run_locality,
}


# -- CLI ---------------------------------------------------------------------------


def write_csv(path, report, alloc_config):
    row = report.csv_row(alloc_config)
    exists = os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RunReport.CSV_COLUMNS)
        if not exists:
            writer.writeheader()
        writer.writerow(row)


def write_stack_csv(path, allocator):
    """Per-stack push/pop/retry counters, one row per pool stack."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["real_span_index", "pool_index",
                         "pushes", "pops", "retries"])
        writer.writerows(allocator.pool.stack_counters())


def _parse_size_range(text):
    lo, _, hi = text.partition(":")
    return int(lo), int(hi)


def build_arg_parser():
    parser = argparse.ArgumentParser(
        prog="spanalloc-bench",
        description="Run allocator workloads and emit CSV metrics.")
    parser.add_argument("--workload", choices=WORKLOADS, default="threadtest")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--rounds", type=int, default=10)
    parser.add_argument("--objects", type=int, default=None,
                        help="objects per round (default: 100000/threads)")
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--size-range", type=_parse_size_range, default=None,
                        metavar="MIN:MAX")
    parser.add_argument("--duration", type=float, default=None,
                        help="time limit in seconds (larson_like)")
    parser.add_argument("--handoffs", type=int, default=8)
    parser.add_argument("--producers", type=int, default=None,
                        help="prodcons role split; default symmetric")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--csv", type=str, default=None)
    parser.add_argument("--ablate", type=str, default="",
                        help="comma list of " + ",".join(ABLATION_FLAGS))
    parser.add_argument("--provider", choices=("os", "sim"), default="os")
    parser.add_argument("--pool-width", type=int, default=None)
    parser.add_argument("--reuse-threshold", type=int, default=80,
                        metavar="PCT")
    parser.add_argument("--arena-bytes", type=int, default=None)
    parser.add_argument("--lab-mode", choices=("tlab", "clab"), default="tlab")
    parser.add_argument("--guard-pages", action="store_true")
    parser.add_argument("--no-touch", action="store_true",
                        help="skip writing into allocated objects")
    parser.add_argument("--instrument", action="store_true",
                        help="attach the fragmentation ledger")
    parser.add_argument("--frag-csv", type=str, default=None,
                        help="dump the ledger event log (implies --instrument)")
    parser.add_argument("--stacks-csv", type=str, default=None,
                        help="dump per-stack pool counters")
    parser.add_argument("--dump-size-classes", action="store_true",
                        help="print the size-class table as CSV and exit")
    return parser


def main(argv=None):
    args = build_arg_parser().parse_args(argv)
    if args.dump_size_classes:
        sys.stdout.write(dump_csv())
        return 0

    overrides = dict(
        provider=args.provider,
        reuse_percent=args.reuse_threshold,
        lab_mode=args.lab_mode,
        guard_pages=args.guard_pages,
        instrument=args.instrument or args.frag_csv is not None,
    )
    if args.pool_width is not None:
        overrides["pool_width"] = args.pool_width
    if args.arena_bytes is not None:
        overrides["arena_bytes"] = args.arena_bytes
    flags = tuple(f for f in args.ablate.split(",") if f)
    allocator = ablate(flags, base_config=AllocatorConfig.from_env(),
                       **overrides)

    config = WorkloadConfig(
        name=args.workload,
        threads=args.threads,
        rounds=args.rounds,
        objects_per_round=args.objects,
        object_size=args.size,
        size_range=args.size_range,
        duration=args.duration,
        handoffs=args.handoffs,
        producers=args.producers,
        seed=args.seed,
        touch_objects=not args.no_touch,
    )
    report = run(config, allocator)

    print(f"workload={report.workload} threads={report.threads} "
          f"ops={report.ops} elapsed={report.elapsed_s:.3f}s "
          f"ops/s={report.ops_per_second:,.0f} "
          f"peak_committed={report.peak_committed_bytes}")
    for key in ("remote_free_fraction", "probe_ok", "leaked_blocks"):
        if key in report.extra:
            print(f"  {key}={report.extra[key]}")
    if allocator.ledger is not None:
        print(f"  frag_bytes={allocator.ledger.f}")
    if args.csv:
        write_csv(args.csv, report, allocator.config)
        print(f"csv row appended to {args.csv}")
    if args.frag_csv:
        with open(args.frag_csv, "w", newline="") as fh:
            allocator.ledger.dump_csv(fh)
        print(f"ledger events written to {args.frag_csv}")
    if args.stacks_csv:
        write_stack_csv(args.stacks_csv, allocator)
        print(f"per-stack counters written to {args.stacks_csv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
