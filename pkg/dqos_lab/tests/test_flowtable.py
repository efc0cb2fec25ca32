import math

import numpy as np
import pytest

from dqos_lab.flowtable import (
    FlowKey,
    FlowRule,
    FlowTable,
    InstallOutcome,
    MISS,
)


def key(n: int) -> FlowKey:
    return FlowKey(0x0A000001, 0x0A000002, 1000 + n, 80, 17)


class NaiveTable:
    """Reference table: a plain dict scanned in full on every operation."""

    def __init__(self, capacity, idle, hard):
        self.capacity = capacity
        self.idle = idle
        self.hard = hard
        self.rules = {}
        self.stats = dict(hits=0, misses=0, installs=0, evictions_idle=0, evictions_hard=0, rejects_full=0, refreshes=0)

    def _expire(self, now):
        for k, (hop, installed, last) in list(self.rules.items()):
            if now - last >= self.idle:
                del self.rules[k]
                self.stats["evictions_idle"] += 1
            elif now - installed >= self.hard:
                del self.rules[k]
                self.stats["evictions_hard"] += 1

    def lookup(self, k, now):
        self._expire(now)
        if k not in self.rules:
            self.stats["misses"] += 1
            return None
        hop, installed, _ = self.rules[k]
        self.rules[k] = (hop, installed, now)
        self.stats["hits"] += 1
        return hop

    def install(self, k, hop, now):
        self._expire(now)
        if k in self.rules:
            self.rules[k] = (hop, now, now)
            self.stats["refreshes"] += 1
            return InstallOutcome.REFRESHED
        if len(self.rules) >= self.capacity:
            self.stats["rejects_full"] += 1
            return InstallOutcome.REJECTED_FULL
        self.rules[k] = (hop, now, now)
        self.stats["installs"] += 1
        return InstallOutcome.INSTALLED


def test_lookup_on_empty_table_is_miss():
    table = FlowTable(capacity=2)
    assert table.lookup(key(1), 0) == MISS
    assert table.stats.misses == 1


def test_install_then_hit():
    table = FlowTable(capacity=2, idle_timeout=5)
    assert table.preinstall(key(1), "s2", 0) is InstallOutcome.INSTALLED
    result = table.lookup(key(1), 3)
    assert result.hit
    assert result.next_hop == "s2"
    assert table.get(key(1)).last_hit_at == 3


def test_idle_timeout_boundary_is_inclusive():
    table = FlowTable(capacity=2, idle_timeout=5)
    table.preinstall(key(1), "s2", 0)
    assert table.lookup(key(1), 4).hit
    assert not table.lookup(key(1), 9).hit
    assert table.stats.evictions_idle == 1


def test_hits_keep_rule_alive_until_hard_timeout():
    table = FlowTable(capacity=2, idle_timeout=5, hard_timeout=12)
    table.preinstall(key(1), "s2", 0)
    for t in (4, 8, 11):
        assert table.lookup(key(1), t).hit
    assert not table.lookup(key(1), 12).hit
    assert table.stats.evictions_hard == 1


def test_full_table_rejects_new_key():
    table = FlowTable(capacity=1)
    table.preinstall(key(1), "a", 0)
    assert table.preinstall(key(2), "b", 1) is InstallOutcome.REJECTED_FULL
    assert len(table) == 1
    assert key(2) not in table
    assert table.stats.rejects_full == 1


def test_expired_rule_frees_space():
    table = FlowTable(capacity=1, idle_timeout=5)
    table.preinstall(key(1), "a", 0)
    assert table.preinstall(key(2), "b", 5) is InstallOutcome.INSTALLED
    assert list(r.key for r in table) == [key(2)]


def test_reinstall_refreshes_action_and_timers():
    table = FlowTable(capacity=1, idle_timeout=5, hard_timeout=10)
    table.preinstall(key(1), "a", 0)
    assert table.install(FlowRule(key(1), "b", 0, 0), 4) is InstallOutcome.REFRESHED
    rule = table.get(key(1))
    assert (rule.action_next_hop, rule.installed_at, rule.last_hit_at) == ("b", 4, 4)
    assert table.lookup(key(1), 8).hit
    assert not table.lookup(key(1), 14).hit


def test_active_count_does_not_mutate():
    table = FlowTable(capacity=3, idle_timeout=5)
    table.preinstall(key(1), "a", 0)
    table.preinstall(key(2), "a", 3)
    assert table.active_count(6) == 1
    assert len(table) == 2
    assert table.stats.evictions_idle == 0


def test_zero_capacity_table_never_installs():
    table = FlowTable(capacity=0)
    assert table.preinstall(key(1), "a", 0) is InstallOutcome.REJECTED_FULL
    assert not table.lookup(key(1), 0).hit


def test_invalid_arguments():
    with pytest.raises(ValueError):
        FlowTable(capacity=-1)
    with pytest.raises(ValueError):
        FlowTable(idle_timeout=0)
    with pytest.raises(ValueError, match="src_port"):
        FlowKey(1, 2, 70000, 80, 17)


def test_flow_key_str():
    assert str(FlowKey(0x0A000001, 0x0A000002, 5000, 80, 17)) == "10.0.0.1:5000->10.0.0.2:80/17"


@pytest.mark.parametrize("hard", [12.0, math.inf])
def test_random_sequences_match_reference(hard):
    rng = np.random.default_rng(2024)
    for _ in range(5_000):
        capacity = int(rng.integers(0, 5))
        table = FlowTable(capacity, 5.0, hard)
        naive = NaiveTable(capacity, 5.0, hard)
        now = 0.0
        for _ in range(20):
            now += float(rng.integers(0, 4))
            k = key(int(rng.integers(0, 6)))
            if rng.random() < 0.5:
                got = table.lookup(k, now)
                expected = naive.lookup(k, now)
                assert got.next_hop == expected
            else:
                hop = int(rng.integers(0, 3))
                assert table.preinstall(k, hop, now) is naive.install(k, hop, now)
            assert len(table) == len(naive.rules) <= capacity
            assert table.active_count(now) == len(naive.rules)
        assert table.stats.as_record() == naive.stats


def test_counter_conservation():
    rng = np.random.default_rng(5)
    table = FlowTable(3, 4.0, 9.0)
    now = 0.0
    for _ in range(2_000):
        now += float(rng.integers(0, 3))
        k = key(int(rng.integers(0, 8)))
        if rng.random() < 0.5:
            table.lookup(k, now)
        else:
            table.preinstall(k, "x", now)
        s = table.stats
        assert s.installs - s.evictions_idle - s.evictions_hard == len(table)


def test_evict_expired_counts_by_timeout():
    table = FlowTable(capacity=4, idle_timeout=100.0, hard_timeout=math.inf)
    table.install(FlowRule(key(1), "s2", 0.0, 0.0), 0.0)
    table.install(FlowRule(key(2), "s2", 0.0, 0.0), 50.0)
    assert table.evict_expired(100.0) == 1
    assert table.evict_expired(100.0) == 0
    assert key(2) in table and key(1) not in table
    assert table.stats.evictions_idle == 1

    hard = FlowTable(capacity=4, idle_timeout=math.inf, hard_timeout=100.0)
    hard.install(FlowRule(key(1), "s2", 0.0, 0.0), 0.0)
    assert hard.evict_expired(99.0) == 0
    assert hard.evict_expired(100.0) == 1
    assert hard.stats.evictions_hard == 1
