"""
Deterministic discrete-event engine for the simulated SDN fabric.

Time is kept internally as integer microseconds and reported in
milliseconds. Events run in ``(fire_at, seq)`` order, so two runs that
schedule the same events in the same order are identical.

Packets move store-and-forward: an egress `Port` serialises its FIFO
backlog over the link, then the packet propagates for the link delay and
arrives at the next node. Background load is not made of packets; it is a
fluid rate per port (see `Engine.set_background_load`) that shares the
backlog, the byte capacity and the drop counters with real packets.

Switches consult their `FlowTable`; a miss holds the packet for one
controller round trip, after which the controller installs the rule and
the packet is forwarded. If the table is full the packet is still
forwarded but no rule is installed, and the controller keeps handling that
flow packet by packet until it has been idle for the idle timeout.
"""

import heapq
import logging
import math
import os
from bisect import bisect_left, bisect_right
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, Protocol

import numpy as np
import pandas as pd

from dqos_lab import columnar_io
from dqos_lab.flowtable import FlowKey, FlowRule, FlowTable, InstallOutcome
from dqos_lab.topology import Link, NodeId, NodeRef, Topology

log = logging.getLogger(__name__)

US_PER_MS = 1000
DEFAULT_QUEUE_CAPACITY_BYTES = 64 * 1024
DEFAULT_HISTORY_HORIZON_MS = 60_000


class SimulationInvariantError(RuntimeError):
    """Raised when the engine detects an internal consistency violation."""


def ms_to_us(ms: float) -> int:
    return int(round(ms * US_PER_MS))


def us_to_ms(us: int) -> float:
    return us / US_PER_MS


def transmission_delay(size: int, bandwidth: float) -> float:
    """Serialisation time in ms of `size` bytes on a `bandwidth` bit/s link."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    return size * 8 / bandwidth * 1000.0


class TrafficClass(str, Enum):
    VIDEO = "video"
    DUMMY = "dummy"
    ATTACK = "attack"


@dataclass(slots=True, eq=False)
class Packet:
    key: FlowKey
    size: int
    src: NodeId
    dst: NodeId
    traffic_class: TrafficClass
    frame_id: int | None = None
    created_us: int = 0
    miss_count: int = 0

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError(f"Packet size must be > 0, got {self.size}")
        if self.created_us < 0:
            raise ValueError("Packet created_at must be >= 0")

    @property
    def created_at(self) -> float:
        return us_to_ms(self.created_us)


class EventKind(Enum):
    ARRIVAL = 1
    CONTROLLER_REPLY = 2
    TIMER = 3


@dataclass(order=True, slots=True)
class Event:
    fire_at: int
    seq: int
    kind: EventKind = field(compare=False)
    target: Any = field(compare=False)
    payload: Any = field(compare=False)


class TimerOwner(Protocol):
    def on_timer(self, engine: "Engine", tag: Any) -> None: ...


@dataclass(frozen=True, slots=True)
class LatencyRecord:
    frame_id: int | None
    src: NodeId
    dst: NodeId
    created_at: float
    delivered_at: float
    miss_count: int
    traffic_class: TrafficClass

    @property
    def latency(self) -> float:
        return self.delivered_at - self.created_at


# --------------------------------------------------------------------------- #
# Switches and ports
# --------------------------------------------------------------------------- #
class _EventLog:
    """Weighted event times with running totals, pruned to a fixed horizon."""

    __slots__ = ("times", "totals", "base", "horizon")

    def __init__(self, horizon_us: int):
        self.times: list[int] = []
        self.totals: list[float] = []
        self.base = 0.0
        self.horizon = horizon_us

    def add(self, t: int, n: float = 1.0) -> None:
        if self.times and self.times[-1] == t:
            self.totals[-1] += n
            return
        self.times.append(t)
        self.totals.append((self.totals[-1] if self.totals else self.base) + n)
        # amortised pruning: only when the stale prefix is large
        if len(self.times) > 4096 and self.times[0] < t - self.horizon:
            cut = bisect_left(self.times, t - self.horizon)
            if cut > len(self.times) // 2:
                self.base = self.totals[cut - 1]
                del self.times[:cut]
                del self.totals[:cut]

    def total_at(self, t: int) -> float:
        i = bisect_right(self.times, t)
        return self.totals[i - 1] if i else self.base

    def count(self, start_excl: int, end_incl: int) -> float:
        return self.total_at(end_incl) - self.total_at(start_excl)


@dataclass
class SwitchState:
    node: NodeId
    table: FlowTable
    held: int = 0
    drop_count: float = 0.0
    forward_count: float = 0.0
    egress: dict[NodeId, "Port"] = field(default_factory=dict)
    history_horizon_us: int = DEFAULT_HISTORY_HORIZON_MS * US_PER_MS
    refusal_memory_us: float = math.inf
    refused: dict[FlowKey, int] = field(default_factory=dict, repr=False)
    _drops: _EventLog = field(init=False, repr=False)
    _forwards: _EventLog = field(init=False, repr=False)
    _prune_refused_at: int = field(default=4096, init=False, repr=False)

    def __post_init__(self):
        self._drops = _EventLog(self.history_horizon_us)
        self._forwards = _EventLog(self.history_horizon_us)

    def note_drop(self, now: int, n: float = 1.0) -> None:
        self.drop_count += n
        self._drops.add(now, n)

    def note_forward(self, now: int, n: float = 1.0) -> None:
        self.forward_count += n
        self._forwards.add(now, n)

    def sync(self, now: int) -> None:
        for port in self.egress.values():
            port.advance(now)

    def drop_rate(self, window_us: int, now_us: int) -> float:
        """Percentage of dropped packets among those handled in (now - window, now]."""
        if window_us <= 0:
            raise ValueError("window must be > 0")
        if window_us > self.history_horizon_us:
            raise ValueError(
                f"{self.node}: window of {window_us} us exceeds the {self.history_horizon_us} us drop history"
            )
        start = now_us - window_us
        drops = self._drops.count(start, now_us)
        forwards = self._forwards.count(start, now_us)
        total = drops + forwards
        return 100.0 * drops / total if total > 0 else 0.0

    # the controller keeps forwarding a refused flow by hand until it goes idle
    def refused_recently(self, key: FlowKey, now: int) -> bool:
        seen = self.refused.get(key)
        if seen is None:
            return False
        if now - seen >= self.refusal_memory_us:
            del self.refused[key]
            return False
        self.refused[key] = now
        return True

    def remember_refusal(self, key: FlowKey, now: int) -> None:
        self.refused[key] = now
        if len(self.refused) > self._prune_refused_at:
            memory = self.refusal_memory_us
            self.refused = {k: t for k, t in self.refused.items() if now - t < memory}
            self._prune_refused_at = max(4096, 2 * len(self.refused))

    @property
    def queued_packets(self) -> int:
        return sum(port.occupancy for port in self.egress.values())

    @property
    def waiting(self) -> int:
        return self.held + self.queued_packets


class Port:
    """
    Egress side of one direction of a link.

    Unfinished work is a byte backlog drained at the link rate. Packets join
    it in FIFO order and learn their departure time on admission. Background
    load is a fluid poured into the same backlog at a constant rate between
    `set_background` calls; what does not fit under the byte capacity is
    dropped and booked against the switch in background-packet units.
    A packet admitted into a port the fluid keeps full pushes out as many
    queued fluid bytes, so the backlog stays within the capacity.
    """

    def __init__(
        self,
        engine: "Engine",
        link: Link,
        src: NodeId,
        dst: NodeId,
        capacity_bytes: float,
        switch: SwitchState | None = None,
    ):
        self.engine = engine
        self.link = link
        self.src = src
        self.dst = dst
        self.capacity_bytes = capacity_bytes
        self.switch = switch
        self.bandwidth = link.bandwidth
        self.rate = link.bandwidth / 8e6  # bytes per us
        self.delay_us = ms_to_us(link.propagation_delay)
        self.backlog = 0.0
        self.peak_queued_bytes = 0.0
        self.bytes_sent = 0.0
        self.background_rate = 0.0  # bytes per us
        self.background_packet_bytes = 1500
        self.background_offered = 0.0
        self.background_dropped = 0.0
        self._updated = 0
        self._drop_credit = 0.0
        self._pending: deque[tuple[int, int]] = deque()
        self._pending_bytes = 0

    @property
    def occupancy(self) -> int:
        """Packets waiting or in transmission, background packets included."""
        self.advance(self.engine.clock)
        fluid = max(self.backlog - self._pending_bytes, 0.0)
        return len(self._pending) + int(fluid // self.background_packet_bytes)

    @property
    def saturated(self) -> bool:
        return self.background_rate > self.rate and self.backlog >= self.capacity_bytes - 1e-6

    def advance(self, now: int) -> None:
        """Drain the backlog and pour in the background fluid up to `now` (us)."""
        dt = now - self._updated
        if dt <= 0:
            return
        self._updated = now
        lam, mu, cap = self.background_rate, self.rate, self.capacity_bytes
        q0 = self.backlog
        offered = lam * dt
        q, rest, dropped = q0, float(dt), 0.0
        if q0 > cap:
            # an empty port admitted a packet larger than the capacity; fluid is refused while it drains
            blocked = min(rest, (q0 - cap) / mu)
            q -= mu * blocked
            rest -= blocked
            dropped = lam * blocked
        if rest > 0:
            q += (lam - mu) * rest
            if q > cap:
                dropped += q - cap
                q = cap
            elif q < 0:
                q = 0.0
        self.backlog = q
        self.bytes_sent += q0 + offered - dropped - q
        if offered > 0:
            self.background_offered += offered
            self.background_dropped += dropped
            if self.switch is not None:
                size = self.background_packet_bytes
                if dropped > 0:
                    self.switch.note_drop(now, dropped / size)
                self.switch.note_forward(now, (offered - dropped) / size)
        while self._pending and self._pending[0][0] <= now:
            self._pending_bytes -= self._pending.popleft()[1]

    def set_background(self, bytes_per_s: float, packet_bytes: int) -> None:
        if bytes_per_s < 0 or packet_bytes <= 0:
            raise ValueError("background rate must be >= 0 and packet size > 0")
        self.advance(self.engine.clock)
        self.background_rate = bytes_per_s / 1e6
        self.background_packet_bytes = packet_bytes

    def _admit_while_saturated(self) -> bool:
        # error diffusion: the same loss share as the background fluid, no RNG
        self._drop_credit += (self.background_rate - self.rate) / self.background_rate
        if self._drop_credit >= 1.0:
            self._drop_credit -= 1.0
            return False
        return True

    def _push_out_background(self, nbytes: float, now: int) -> bool:
        """Drop `nbytes` of queued fluid to make room; False if not enough is queued."""
        fluid = self.backlog - self._pending_bytes
        if fluid < nbytes:
            return False
        self.backlog -= nbytes
        self.background_dropped += nbytes
        if self.switch is not None:
            # the pushed-out bytes were booked as forwarded when they were queued
            n = nbytes / self.background_packet_bytes
            self.switch.note_drop(now, n)
            self.switch.note_forward(now, -n)
        return True

    def offer(self, packet: Packet) -> bool:
        """Accept `packet` for transmission; False means drop-tail overflow."""
        engine = self.engine
        now = engine.clock
        self.advance(now)
        size = packet.size
        if self.backlog > 0 and self.backlog + size > self.capacity_bytes:
            if not (self.saturated and self._admit_while_saturated()):
                return False
            if not self._push_out_background(self.backlog + size - self.capacity_bytes, now):
                return False
        self.backlog += size
        if self.backlog > self.peak_queued_bytes:
            self.peak_queued_bytes = self.backlog
        finish = now + int(round(self.backlog / self.rate))
        self._pending.append((finish, size))
        self._pending_bytes += size
        if self.switch is not None:
            self.switch.note_forward(now)
        engine.propagate(packet, self.dst, finish + self.delay_us)
        return True


# --------------------------------------------------------------------------- #
# Configuration and report
# --------------------------------------------------------------------------- #
@dataclass
class SimConfig:
    queue_capacity_bytes: int = DEFAULT_QUEUE_CAPACITY_BYTES
    table_capacity: int = 1000
    idle_timeout_ms: float | None = 5000.0
    hard_timeout_ms: float | None = None
    controller_rtt_ms: float | None = None
    rtt_jitter: float = 0.0
    history_horizon_ms: int = DEFAULT_HISTORY_HORIZON_MS
    record_classes: frozenset = frozenset({TrafficClass.VIDEO, TrafficClass.ATTACK})
    seed: int = 0

    def __post_init__(self):
        if self.queue_capacity_bytes <= 0:
            raise ValueError("queue_capacity_bytes must be > 0")
        if not 0.0 <= self.rtt_jitter < 1.0:
            raise ValueError("rtt_jitter must be in [0, 1)")
        self.record_classes = frozenset(TrafficClass(c) for c in self.record_classes)


@dataclass
class SimReport:
    clock_ms: float
    created: dict[str, int]
    delivered: dict[str, int]
    dropped: dict[str, int]
    in_flight: int
    switch_stats: list[dict[str, Any]]
    records: tuple[LatencyRecord, ...]
    background_offered: float = 0.0
    background_dropped: float = 0.0

    def mean_latency(self, traffic_class: TrafficClass = TrafficClass.VIDEO) -> float:
        values = [r.latency for r in self.records if r.traffic_class is traffic_class]
        return float(np.mean(values)) if values else math.nan

    def latency_frame(self) -> pd.DataFrame:
        return latency_frame(self.records)

    def switch_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.switch_stats, columns=SWITCH_STAT_COLUMNS)


LATENCY_COLUMNS = [
    "frame_id",
    "class",
    "src",
    "dst",
    "created_ms",
    "delivered_ms",
    "latency_ms",
    "miss_count",
]
SWITCH_STAT_COLUMNS = [
    "switch",
    "forwarded",
    "dropped",
    "drop_pct",
    "table_size",
    "hits",
    "misses",
    "installs",
    "refreshes",
    "evictions_idle",
    "evictions_hard",
    "rejects_full",
    "held",
    "peak_queue_bytes",
]


def latency_frame(records: Iterable[LatencyRecord]) -> pd.DataFrame:
    rows = [
        (
            -1 if r.frame_id is None else r.frame_id,
            r.traffic_class.value,
            r.src.name,
            r.dst.name,
            r.created_at,
            r.delivered_at,
            r.latency,
            r.miss_count,
        )
        for r in records
    ]
    return pd.DataFrame(rows, columns=LATENCY_COLUMNS)


def latency_histogram(records: Iterable[LatencyRecord], bin_ms: float = 5.0) -> pd.DataFrame:
    """Counts of record latencies in half-open bins of width `bin_ms`."""
    if bin_ms <= 0:
        raise ValueError("bin_ms must be > 0")
    latencies = np.array([r.latency for r in records], dtype=float)
    if latencies.size == 0:
        return pd.DataFrame({"bin_start_ms": [], "count": []})
    top = math.floor(latencies.max() / bin_ms) + 1
    edges = np.arange(top + 1) * bin_ms
    counts, _ = np.histogram(latencies, bins=edges)
    return pd.DataFrame({"bin_start_ms": edges[:-1], "count": counts})


def write_sim_report(
    report: SimReport, out_dir: str, header: dict[str, Any] | None = None, prefix: str = ""
) -> list[str]:
    """Write ``<prefix>latency.tsv`` and ``<prefix>switch_stats.tsv``."""
    meta = dict(header or {})
    meta.update(
        {
            "clock_ms": report.clock_ms,
            "in_flight": report.in_flight,
            "created": _counter_text(report.created),
            "delivered": _counter_text(report.delivered),
            "dropped": _counter_text(report.dropped),
            "background_offered_pkts": round(report.background_offered, 3),
            "background_dropped_pkts": round(report.background_dropped, 3),
        }
    )
    latency_path = os.path.join(out_dir, f"{prefix}latency.tsv")
    switch_path = os.path.join(out_dir, f"{prefix}switch_stats.tsv")
    columnar_io.write_table(report.latency_frame(), latency_path, "latency-records", meta)
    columnar_io.write_table(report.switch_frame(), switch_path, "switch-stats", meta)
    return [latency_path, switch_path]


def _counter_text(counts: dict[str, int]) -> str:
    return ",".join(f"{k}={counts[k]}" for k in sorted(counts))


# --------------------------------------------------------------------------- #
# Engine
# --------------------------------------------------------------------------- #
class Engine:
    """Single-threaded event loop owning all mutable simulation state."""

    def __init__(self, topology: Topology, config: SimConfig | None = None):
        self.topology = topology
        self.config = config or SimConfig()
        self.clock = 0
        self._heap: list[Event] = []
        self._seq = 0
        self._propagating = 0
        self.created: Counter = Counter()
        self.delivered: Counter = Counter()
        self.dropped: Counter = Counter()
        self.records: list[LatencyRecord] = []
        self._delivery_hooks: list[Callable[["Engine", Packet], None]] = []

        rtt_ms = (
            topology.controller_rtt
            if self.config.controller_rtt_ms is None
            else self.config.controller_rtt_ms
        )
        self.controller_rtt_us = ms_to_us(rtt_ms)
        self._rtt_rng = np.random.default_rng([self.config.seed, topology.controller.id])

        idle = _timeout_us(self.config.idle_timeout_ms)
        hard = _timeout_us(self.config.hard_timeout_ms)
        horizon = self.config.history_horizon_ms * US_PER_MS
        self.switches: dict[NodeId, SwitchState] = {
            node: SwitchState(
                node,
                FlowTable(self.config.table_capacity, idle, hard),
                history_horizon_us=horizon,
                refusal_memory_us=idle,
            )
            for node in topology.switches
        }
        self.ports: dict[tuple[NodeId, NodeId], Port] = {}
        for link in topology.links:
            a, b = link.endpoints
            for src, dst in ((a, b), (b, a)):
                switch = self.switches.get(src)
                capacity = self.config.queue_capacity_bytes if switch else math.inf
                port = Port(self, link, src, dst, capacity, switch)
                self.ports[(src, dst)] = port
                if switch is not None:
                    switch.egress[dst] = port
        self._background: dict[Port, float] = {}
        log.debug(
            "Engine ready: %d switches, %d ports, controller rtt %d us",
            len(self.switches),
            len(self.ports),
            self.controller_rtt_us,
        )

    # ------------------------------------------------------------------ #
    # Scheduling
    # ------------------------------------------------------------------ #
    @property
    def now_ms(self) -> float:
        return us_to_ms(self.clock)

    def _push(self, fire_at: int, kind: EventKind, target: Any, payload: Any) -> None:
        if fire_at < self.clock:
            raise SimulationInvariantError(
                f"Event scheduled in the past: {fire_at} < clock {self.clock}"
            )
        self._seq += 1
        heapq.heappush(self._heap, Event(fire_at, self._seq, kind, target, payload))

    def schedule_timer(self, owner: TimerOwner, fire_at_us: int, tag: Any = None) -> None:
        self._push(int(fire_at_us), EventKind.TIMER, owner, tag)

    def propagate(self, packet: Packet, to: NodeId, fire_at_us: int) -> None:
        self._propagating += 1
        self._push(fire_at_us, EventKind.ARRIVAL, to, packet)

    def pending(self) -> int:
        return len(self._heap)

    def add_delivery_hook(self, hook: Callable[["Engine", Packet], None]) -> None:
        self._delivery_hooks.append(hook)

    # ------------------------------------------------------------------ #
    # Packet entry and exit
    # ------------------------------------------------------------------ #
    def send(self, packet: Packet) -> None:
        """Inject `packet` at its source node at the current clock."""
        switches = self.topology.route(packet.src, packet.dst)
        packet.created_us = self.clock
        self.created[packet.traffic_class.value] += 1
        port = self.ports[(packet.src, switches[0])]
        if not port.offer(packet):
            raise SimulationInvariantError(f"Source port {port.src} refused a packet")

    def _deliver(self, packet: Packet) -> None:
        self.delivered[packet.traffic_class.value] += 1
        if packet.traffic_class in self.config.record_classes:
            self.records.append(
                LatencyRecord(
                    packet.frame_id,
                    packet.src,
                    packet.dst,
                    packet.created_at,
                    self.now_ms,
                    packet.miss_count,
                    packet.traffic_class,
                )
            )
        for hook in self._delivery_hooks:
            hook(self, packet)

    # ------------------------------------------------------------------ #
    # Switch behaviour
    # ------------------------------------------------------------------ #
    def _controller_delay_us(self) -> int:
        jitter = self.config.rtt_jitter
        if not jitter:
            return self.controller_rtt_us
        factor = 1.0 + self._rtt_rng.uniform(-jitter, jitter)
        return int(round(self.controller_rtt_us * factor))

    def handle_arrival(self, switch: SwitchState, packet: Packet) -> None:
        result = switch.table.lookup(packet.key, self.clock)
        if result.hit:
            self._forward(switch, packet, result.next_hop)
            return
        packet.miss_count += 1
        switch.held += 1
        self._push(
            self.clock + self._controller_delay_us(),
            EventKind.CONTROLLER_REPLY,
            switch,
            packet,
        )

    def handle_controller_reply(self, switch: SwitchState, packet: Packet) -> None:
        next_hop = self.topology.next_hop(packet.src, packet.dst, switch.node)
        switch.held -= 1
        if not switch.refused_recently(packet.key, self.clock):
            outcome = switch.table.install(FlowRule(packet.key, next_hop, self.clock, self.clock), self.clock)
            if outcome is InstallOutcome.REJECTED_FULL:
                switch.remember_refusal(packet.key, self.clock)
        self._forward(switch, packet, next_hop)

    def _forward(self, switch: SwitchState, packet: Packet, next_hop: NodeId) -> None:
        if not switch.egress[next_hop].offer(packet):
            switch.note_drop(self.clock)
            self.dropped[packet.traffic_class.value] += 1

    def _on_arrival(self, node: NodeId, packet: Packet) -> None:
        self._propagating -= 1
        if node == packet.dst:
            self._deliver(packet)
            return
        switch = self.switches.get(node)
        if switch is None:
            raise SimulationInvariantError(f"Packet for {packet.dst} arrived at {node}")
        self.handle_arrival(switch, packet)

    # ------------------------------------------------------------------ #
    # Background load
    # ------------------------------------------------------------------ #
    def _route_ports(self, src: NodeId, dst: NodeId) -> list[Port]:
        nodes = [src, *self.topology.route(src, dst), dst]
        return [self.ports[(a, b)] for a, b in zip(nodes, nodes[1:])]

    def set_background_load(self, flows: Mapping[tuple[NodeId, NodeId], float], packet_bytes: int) -> None:
        """
        Replace the fluid background traffic with `flows`.

        `flows` maps a (src, dst) route to its offered rate in packets/s. A
        port offered more than its link rate passes on only its share of the
        link to the ports behind it; the split is iterated to a fixed point
        along the routes.
        """
        paths = {pair: self._route_ports(*pair) for pair in sorted(flows)}
        passing: dict[Port, float] = {}
        loads: dict[Port, float] = {}
        for _ in range(1 + max((len(p) for p in paths.values()), default=0)):
            loads = {}
            for pair, ports in paths.items():
                rate = flows[pair] * packet_bytes
                for port in ports:
                    loads[port] = loads.get(port, 0.0) + rate
                    rate *= passing.get(port, 1.0)
            passing = {
                port: min(1.0, port.rate * 1e6 / load) if load > 0 else 1.0 for port, load in loads.items()
            }
        for port in self._background:
            if port not in loads:
                port.set_background(0.0, packet_bytes)
        for port, load in loads.items():
            port.set_background(load, packet_bytes)
        self._background = loads

    def sync(self) -> None:
        """Bring every port's backlog and background counters up to the clock."""
        for port in self.ports.values():
            port.advance(self.clock)

    # ------------------------------------------------------------------ #
    # Main loop
    # ------------------------------------------------------------------ #
    def run(self, until: float) -> SimReport:
        """Execute every event with fire_at <= `until` (ms); the clock ends at `until`."""
        until_us = ms_to_us(until)
        if until_us < self.clock:
            raise ValueError(f"run(until={until}) precedes clock {self.now_ms}")
        heap = self._heap
        while heap and heap[0].fire_at <= until_us:
            event = heapq.heappop(heap)
            if event.fire_at < self.clock:
                raise SimulationInvariantError("Clock would move backwards")
            self.clock = event.fire_at
            kind = event.kind
            if kind is EventKind.ARRIVAL:
                self._on_arrival(event.target, event.payload)
            elif kind is EventKind.CONTROLLER_REPLY:
                self.handle_controller_reply(event.target, event.payload)
            else:
                event.target.on_timer(self, event.payload)
        self.clock = until_us
        return self.report()

    # ------------------------------------------------------------------ #
    # Observation
    # ------------------------------------------------------------------ #
    def switch(self, ref: NodeRef) -> SwitchState:
        return self.switches[self.topology.node(ref)]

    def port(self, a: NodeRef, b: NodeRef) -> Port:
        return self.ports[(self.topology.node(a), self.topology.node(b))]

    def drop_rate(self, switch: NodeRef, window: float, now: float | None = None) -> float:
        """Windowed drop percentage at `switch`; times in ms."""
        now_us = self.clock if now is None else ms_to_us(now)
        state = self.switch(switch)
        state.sync(self.clock)
        return state.drop_rate(ms_to_us(window), now_us)

    def table_size(self, switch: NodeRef) -> int:
        return self.switch(switch).table.active_count(self.clock)

    def in_flight(self) -> int:
        # packets inside a port already have their arrival scheduled
        return sum(s.held for s in self.switches.values()) + self._propagating

    def check_conservation(self) -> None:
        created = sum(self.created.values())
        accounted = sum(self.delivered.values()) + sum(self.dropped.values()) + self.in_flight()
        if created != accounted:
            raise SimulationInvariantError(
                f"Packet conservation violated: created {created} != accounted {accounted}"
            )

    def report(self) -> SimReport:
        self.sync()
        rows = []
        for node in sorted(self.switches):
            sw = self.switches[node]
            handled = sw.drop_count + sw.forward_count
            stats = sw.table.stats
            rows.append(
                {
                    "switch": node.name,
                    "forwarded": sw.forward_count,
                    "dropped": sw.drop_count,
                    "drop_pct": 100.0 * sw.drop_count / handled if handled else 0.0,
                    "table_size": sw.table.active_count(self.clock),
                    "hits": stats.hits,
                    "misses": stats.misses,
                    "installs": stats.installs,
                    "refreshes": stats.refreshes,
                    "evictions_idle": stats.evictions_idle,
                    "evictions_hard": stats.evictions_hard,
                    "rejects_full": stats.rejects_full,
                    "held": sw.held,
                    "peak_queue_bytes": max(
                        (p.peak_queued_bytes for p in sw.egress.values()), default=0
                    ),
                }
            )
        return SimReport(
            clock_ms=self.now_ms,
            created=dict(self.created),
            delivered=dict(self.delivered),
            dropped=dict(self.dropped),
            in_flight=self.in_flight(),
            switch_stats=rows,
            records=tuple(self.records),
            background_offered=sum(
                p.background_offered / p.background_packet_bytes for p in self.ports.values() if p.switch is None
            ),
            background_dropped=sum(p.background_dropped / p.background_packet_bytes for p in self.ports.values()),
        )


def _timeout_us(timeout_ms: float | None) -> float:
    if timeout_ms is None or math.isinf(timeout_ms):
        return math.inf
    return ms_to_us(timeout_ms)


def drop_rate(engine: Engine, switch: NodeRef, window: float, now: float | None = None) -> float:
    return engine.drop_rate(switch, window, now)


def run(engine: Engine, until: float) -> SimReport:
    return engine.run(until)
