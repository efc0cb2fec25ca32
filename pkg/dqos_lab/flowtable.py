"""
OpenFlow-style exact-match flow table.

Capacity is a rule count. Rules expire lazily: every `lookup` and `install`
first evicts whatever has reached its idle or hard timeout at `now`, so the
table behaves as if a background timer removed rules at the exact moment
they expired. Times are plain numbers in whatever unit the caller uses
(the simulator uses integer microseconds); timeouts must use the same unit.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Hashable, Iterator

log = logging.getLogger(__name__)

DEFAULT_CAPACITY = 1000
INFINITE = math.inf


@dataclass(frozen=True, order=True, slots=True)
class FlowKey:
    """Exact-match 5-tuple. Addresses are opaque 32-bit integers."""

    src_addr: int
    dst_addr: int
    src_port: int
    dst_port: int
    proto: int

    def __post_init__(self):
        for name, bits in (
            ("src_addr", 32),
            ("dst_addr", 32),
            ("src_port", 16),
            ("dst_port", 16),
            ("proto", 8),
        ):
            value = getattr(self, name)
            if not 0 <= value < (1 << bits):
                raise ValueError(f"FlowKey.{name}={value} outside {bits}-bit range")

    def __str__(self) -> str:
        def dotted(addr: int) -> str:
            return ".".join(str((addr >> s) & 0xFF) for s in (24, 16, 8, 0))

        return (
            f"{dotted(self.src_addr)}:{self.src_port}->"
            f"{dotted(self.dst_addr)}:{self.dst_port}/{self.proto}"
        )


@dataclass(slots=True)
class FlowRule:
    key: FlowKey
    action_next_hop: Hashable
    installed_at: float
    last_hit_at: float

    def __post_init__(self):
        if self.last_hit_at < self.installed_at:
            raise ValueError("last_hit_at precedes installed_at")


@dataclass
class FlowTableStats:
    hits: int = 0
    misses: int = 0
    installs: int = 0
    evictions_idle: int = 0
    evictions_hard: int = 0
    rejects_full: int = 0
    refreshes: int = 0

    def as_record(self) -> dict[str, int]:
        return asdict(self)


class InstallOutcome(str, Enum):
    INSTALLED = "installed"
    REFRESHED = "refreshed"
    REJECTED_FULL = "rejected_full"


@dataclass(frozen=True, slots=True)
class LookupResult:
    next_hop: Hashable | None

    @property
    def hit(self) -> bool:
        return self.next_hop is not None


MISS = LookupResult(None)


class FlowTable:
    """
    Bounded rule store keyed on `FlowKey`.

    Two insertion-ordered indexes give amortised O(1) expiry: `_by_hit` is
    kept in last-hit order (a hit moves the rule to the back) and
    `_by_install` in install order, so expired rules are always at the
    front of one of them.
    """

    def __init__(
        self,
        capacity: int = DEFAULT_CAPACITY,
        idle_timeout: float = INFINITE,
        hard_timeout: float = INFINITE,
    ):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        if idle_timeout <= 0 or hard_timeout <= 0:
            raise ValueError("timeouts must be > 0 (use math.inf for none)")
        self.capacity = capacity
        self.idle_timeout = idle_timeout
        self.hard_timeout = hard_timeout
        self.stats = FlowTableStats()
        self._by_hit: OrderedDict[FlowKey, FlowRule] = OrderedDict()
        self._by_install: OrderedDict[FlowKey, FlowRule] = OrderedDict()

    def __len__(self) -> int:
        return len(self._by_hit)

    def __contains__(self, key: FlowKey) -> bool:
        return key in self._by_hit

    def __iter__(self) -> Iterator[FlowRule]:
        return iter(self._by_install.values())

    def get(self, key: FlowKey) -> FlowRule | None:
        return self._by_hit.get(key)

    # ------------------------------------------------------------------ #
    # Expiry
    # ------------------------------------------------------------------ #
    def _idle_expired(self, rule: FlowRule, now: float) -> bool:
        return now - rule.last_hit_at >= self.idle_timeout

    def _hard_expired(self, rule: FlowRule, now: float) -> bool:
        return now - rule.installed_at >= self.hard_timeout

    def _remove(self, key: FlowKey) -> None:
        del self._by_hit[key]
        del self._by_install[key]

    def evict_expired(self, now: float) -> int:
        """Remove every expired rule; a rule past both timeouts counts as idle."""
        evicted = 0
        if self.idle_timeout != INFINITE:
            while self._by_hit:
                key, rule = next(iter(self._by_hit.items()))
                if not self._idle_expired(rule, now):
                    break
                self._remove(key)
                self.stats.evictions_idle += 1
                evicted += 1
        if self.hard_timeout != INFINITE:
            while self._by_install:
                key, rule = next(iter(self._by_install.items()))
                if not self._hard_expired(rule, now):
                    break
                self._remove(key)
                self.stats.evictions_hard += 1
                evicted += 1
        if evicted:
            log.debug("Evicted %d expired rules at t=%s", evicted, now)
        return evicted

    def active_count(self, now: float) -> int:
        """Number of rules still live at `now`, without evicting anything."""
        expired = 0
        if self.idle_timeout != INFINITE:
            for rule in self._by_hit.values():
                if not self._idle_expired(rule, now):
                    break
                expired += 1
        if self.hard_timeout != INFINITE:
            for rule in self._by_install.values():
                if not self._hard_expired(rule, now):
                    break
                if self.idle_timeout == INFINITE or not self._idle_expired(rule, now):
                    expired += 1
        return len(self._by_hit) - expired

    # ------------------------------------------------------------------ #
    # Table operations
    # ------------------------------------------------------------------ #
    def lookup(self, key: FlowKey, now: float) -> LookupResult:
        self.evict_expired(now)
        rule = self._by_hit.get(key)
        if rule is None:
            self.stats.misses += 1
            return MISS
        rule.last_hit_at = now
        self._by_hit.move_to_end(key)
        self.stats.hits += 1
        return LookupResult(rule.action_next_hop)

    def install(self, rule: FlowRule, now: float) -> InstallOutcome:
        """
        Install `rule`, stamping both of its timestamps with `now`.

        A rule whose key is already present replaces the old action and
        restarts both timeouts (REFRESHED). A full table after the eviction
        pass leaves the table untouched (REJECTED_FULL).
        """
        self.evict_expired(now)
        rule.installed_at = now
        rule.last_hit_at = now
        if rule.key in self._by_hit:
            self._by_hit[rule.key] = rule
            self._by_install[rule.key] = rule
            self._by_hit.move_to_end(rule.key)
            self._by_install.move_to_end(rule.key)
            self.stats.refreshes += 1
            return InstallOutcome.REFRESHED
        if len(self._by_hit) >= self.capacity:
            self.stats.rejects_full += 1
            return InstallOutcome.REJECTED_FULL
        self._by_hit[rule.key] = rule
        self._by_install[rule.key] = rule
        self.stats.installs += 1
        return InstallOutcome.INSTALLED

    def preinstall(self, key: FlowKey, next_hop: Hashable, now: float) -> InstallOutcome:
        """Install a rule for `key` directly, as a proactive controller would."""
        return self.install(FlowRule(key, next_hop, now, now), now)
