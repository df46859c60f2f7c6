"""Allocator configuration.

Every tunable lives here so tests, the bench CLI, and environment
variables all feed the same knobs.
"""

import os
from dataclasses import dataclass

# Geometry constants. Virtual spans are fixed 2MB-aligned slots; pages
# are the 4KB system granularity everything else is a multiple of.
VIRTUAL_SPAN_SIZE = 2 * 1024 * 1024
PAGE_SIZE = 4096

# Real spans strictly larger than this are decommitted (all but their
# first page) when they enter the span pool.
DECOMMIT_THRESHOLD = 32 * 1024

TLAB = "tlab"
CLAB = "clab"

_ENV_PREFIX = "SPANALLOC_"


def _env_int(name, default):
    raw = os.environ.get(_ENV_PREFIX + name)
    return int(raw, 0) if raw else default


def _env_str(name, default):
    return os.environ.get(_ENV_PREFIX + name, default)


def _env_bool(name, default):
    raw = os.environ.get(_ENV_PREFIX + name)
    if raw is None:
        return default
    return raw.strip().lower() in ("1", "true", "yes", "on")


@dataclass
class AllocatorConfig:
    # Size of the single reserved arena. 2^35 keeps CI address-space
    # checks happy; raise it for bigger machines.
    arena_bytes: int = 1 << 35
    # "sim" = byte-array backed provider with exact page accounting,
    # "os" = real anonymous mappings with madvise decommit.
    provider: str = "sim"
    guard_pages: bool = False
    # Width of the span pool's stack arrays; None = detected core count.
    pool_width: int | None = None
    # A span becomes reusable when strictly more than this percentage of
    # its blocks are free.
    reuse_percent: int = 80
    lab_mode: str = TLAB
    # Ablation toggles (see bench.ablate).
    decommit_enabled: bool = True
    eager_reclaim: bool = True
    # Test-build instrumentation: fragmentation ledger, transition
    # traces, and double-free scans. All off for plain runs.
    instrument: bool = False
    trace_transitions: bool = False
    debug_checks: bool = False
    # Upper bound on total reserved address space per provider.
    reservation_cap: int = 1 << 46

    def __post_init__(self):
        if self.arena_bytes <= 0 or self.arena_bytes % VIRTUAL_SPAN_SIZE:
            raise ValueError("arena_bytes must be a positive multiple of 2MB")
        if self.provider not in ("sim", "os"):
            raise ValueError("provider must be 'sim' or 'os'")
        if self.lab_mode not in (TLAB, CLAB):
            raise ValueError("lab_mode must be 'tlab' or 'clab'")
        if not (0 <= self.reuse_percent <= 100):
            raise ValueError("reuse_percent must be in [0, 100]")
        if self.pool_width is not None and self.pool_width < 1:
            raise ValueError("pool_width must be >= 1")

    @classmethod
    def from_env(cls, **overrides):
        """Build a config from SPANALLOC_* environment variables.

        Explicit keyword overrides win over the environment.
        """
        values = dict(
            arena_bytes=_env_int("ARENA_BYTES", cls.arena_bytes),
            provider=_env_str("PROVIDER", cls.provider),
            guard_pages=_env_bool("GUARD_PAGES", cls.guard_pages),
            reuse_percent=_env_int("REUSE_PERCENT", cls.reuse_percent),
            lab_mode=_env_str("LAB_MODE", cls.lab_mode),
        )
        pw = _env_int("POOL_WIDTH", 0)
        if pw:
            values["pool_width"] = pw
        values.update(overrides)
        return cls(**values)

    def effective_pool_width(self):
        if self.pool_width is not None:
            return self.pool_width
        return os.cpu_count() or 1
