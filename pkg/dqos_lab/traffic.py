"""
Packet sources driven by the simulation engine.

* `VideoHostSource`: ON-OFF camera hosts sending one packet per video frame
  to a server picked for balanced load at the start of every ON phase, on a
  new connection every segment.
* `AttackerFleet`: the K collaborating attackers. Every forged packet carries
  a never-used `FlowKey`, so it misses at every switch on its route.
* `DummyFleet`: background VMs whose aggregate fluid rate is steered by a
  proportional regulator to hold the target switch's drop rate near its
  long-term mean.

All sources are engine timer owners; each node draws from its own RNG stream
seeded with ``(run seed, node id)``.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from dqos_lab.flowtable import FlowKey
from dqos_lab.simcore import Engine, Packet, TrafficClass, ms_to_us
from dqos_lab.topology import NodeId

log = logging.getLogger(__name__)

MINUTE_MS = 60_000
UDP = 17
VIDEO_DST_PORT = 5004
ATTACK_DST_PORT = 80
HOST_NET = 0x0A000000  # 10.0.0.0
SPOOF_NET = 0x0A640000  # 10.100.0.0
PORTS_PER_ADDR = 1 << 16
EPHEMERAL_BASE = 49152


def node_address(node: NodeId) -> int:
    return HOST_NET + node.id


@dataclass
class TrafficSettings:
    frame_size_bytes: int = 1250
    frame_interval_ms: float = 33.0
    video_segment_s: float | None = 10.0
    on_range_min: tuple[float, float] = (10.0, 15.0)
    off_range_min: tuple[float, float] = (0.0, 5.0)
    max_rate_pps: float = 100.0
    attack_packet_bytes: int = 1000
    dummy_packet_bytes: int = 1500
    dummy_initial_pps: float = 2000.0
    dummy_adjust_interval_ms: float = 1000.0
    dummy_gain: float = 0.1
    dummy_min_step_pps: float = 10.0
    target_drop_pct: float = 0.0
    allowance_pct: float = 3.0

    def __post_init__(self):
        self.on_range_min = tuple(self.on_range_min)
        self.off_range_min = tuple(self.off_range_min)
        for name in ("on_range_min", "off_range_min"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 0 <= low <= high, got {(lo, hi)}")
        if self.frame_interval_ms <= 0:
            raise ValueError("frame_interval_ms must be > 0")
        if self.video_segment_s is not None and self.video_segment_s * 1000.0 < self.frame_interval_ms:
            raise ValueError("video_segment_s must hold at least one frame (or be null)")
        if min(self.frame_size_bytes, self.attack_packet_bytes, self.dummy_packet_bytes) <= 0:
            raise ValueError("packet sizes must be > 0")
        if self.max_rate_pps < 0:
            raise ValueError("max_rate_pps must be >= 0")


# --------------------------------------------------------------------------- #
# Flow keys
# --------------------------------------------------------------------------- #
class FlowKeyAllocator:
    """Run-wide source of fresh keys; no key is ever handed out twice."""

    def __init__(self):
        self.forged = 0
        self._sessions: dict[NodeId, int] = {}

    def next_forged(self, dst: NodeId, dst_port: int = ATTACK_DST_PORT) -> FlowKey:
        n = self.forged
        self.forged += 1
        return FlowKey(
            SPOOF_NET + n // PORTS_PER_ADDR,
            node_address(dst),
            n % PORTS_PER_ADDR,
            dst_port,
            UDP,
        )

    def session_key(self, host: NodeId, server: NodeId) -> FlowKey:
        n = self._sessions.get(host, 0)
        self._sessions[host] = n + 1
        port = EPHEMERAL_BASE + n % (PORTS_PER_ADDR - EPHEMERAL_BASE)
        return FlowKey(node_address(host), node_address(server), port, VIDEO_DST_PORT, UDP)


# --------------------------------------------------------------------------- #
# ON-OFF video hosts
# --------------------------------------------------------------------------- #
class Phase(str, Enum):
    ON = "on"
    OFF = "off"


@dataclass
class OnOffHost:
    host: NodeId
    phase: Phase = Phase.OFF
    until_ms: int = 0
    on_range_ms: tuple[int, int] = (10 * MINUTE_MS, 15 * MINUTE_MS)
    off_range_ms: tuple[int, int] = (0, 5 * MINUTE_MS)
    frame_interval_ms: float = 33.0
    current_server: NodeId | None = None


def next_transition(host: OnOffHost, rng: np.random.Generator) -> tuple[Phase, int]:
    """Next phase and its duration in ms, drawn uniformly from that phase's range."""
    new_phase = Phase.OFF if host.phase is Phase.ON else Phase.ON
    lo, hi = host.on_range_ms if new_phase is Phase.ON else host.off_range_ms
    return new_phase, int(rng.integers(lo, hi + 1))


def assign_server(loads: Mapping[NodeId, int]) -> NodeId:
    """Least-loaded server; ties go to the lowest node id."""
    if not loads:
        raise ValueError("assign_server needs at least one server")
    return min(loads, key=lambda server: (loads[server], server))


class ServerAllocator:
    def __init__(self, servers: Sequence[NodeId]):
        self.loads: dict[NodeId, int] = {s: 0 for s in servers}

    def acquire(self) -> NodeId:
        server = assign_server(self.loads)
        self.loads[server] += 1
        return server

    def release(self, server: NodeId) -> None:
        if self.loads.get(server, 0) <= 0:
            raise ValueError(f"release of idle server {server}")
        self.loads[server] -= 1


class VideoHostSource:
    """
    One camera host; timer tags are ``("frame", session)`` and ``("phase", None)``.

    Each segment of `video_segment_s` seconds goes out on a fresh transport
    connection, so the flow key changes at every segment boundary and the
    switches on the route need new rules for it.
    """

    def __init__(
        self,
        host: NodeId,
        allocator: ServerAllocator,
        keys: FlowKeyAllocator,
        settings: TrafficSettings,
        seed: int,
    ):
        self.state = OnOffHost(
            host,
            on_range_ms=_minutes_to_ms(settings.on_range_min),
            off_range_ms=_minutes_to_ms(settings.off_range_min),
            frame_interval_ms=settings.frame_interval_ms,
        )
        self.allocator = allocator
        self.keys = keys
        self.frame_size = settings.frame_size_bytes
        self.interval_us = ms_to_us(settings.frame_interval_ms)
        self.segment_frames = (
            None
            if settings.video_segment_s is None
            else max(1, int(round(settings.video_segment_s * 1000.0 / settings.frame_interval_ms)))
        )
        self.rng = np.random.default_rng([seed, host.id])
        self.session = 0
        self.session_key: FlowKey | None = None
        self.frames_sent = 0
        self.segment_sent = 0
        self.segments = 0
        self.phase_log: list[tuple[Phase, int, int]] = []

    @property
    def host(self) -> NodeId:
        return self.state.host

    def start(self, engine: Engine) -> None:
        """Hosts begin in an ON phase at the current clock."""
        self._enter(engine, Phase.ON, int(self.rng.integers(*_inclusive(self.state.on_range_ms))))

    def _enter(self, engine: Engine, phase: Phase, duration_ms: int) -> None:
        state = self.state
        now_ms = engine.clock // 1000
        state.phase = phase
        state.until_ms = now_ms + duration_ms
        self.phase_log.append((phase, now_ms, duration_ms))
        if phase is Phase.ON:
            self.session += 1
            state.current_server = self.allocator.acquire()
            self._new_segment()
            log.debug(
                "%s ON for %d ms -> %s", self.host, duration_ms, state.current_server
            )
            engine.schedule_timer(self, engine.clock, ("frame", self.session))
        elif state.current_server is not None:
            self.allocator.release(state.current_server)
            state.current_server = None
        engine.schedule_timer(self, ms_to_us(state.until_ms), ("phase", None))

    def on_timer(self, engine: Engine, tag: Any) -> None:
        kind, session = tag
        if kind == "phase":
            self._enter(engine, *next_transition(self.state, self.rng))
            return
        state = self.state
        if state.phase is not Phase.ON or session != self.session:
            return
        if engine.clock >= ms_to_us(state.until_ms):
            return
        if self.segment_sent == self.segment_frames:
            self._new_segment()
        engine.send(
            Packet(
                self.session_key,
                self.frame_size,
                self.host,
                state.current_server,
                TrafficClass.VIDEO,
                frame_id=self.frames_sent,
            )
        )
        self.frames_sent += 1
        self.segment_sent += 1
        engine.schedule_timer(self, engine.clock + self.interval_us, tag)

    def _new_segment(self) -> None:
        self.session_key = self.keys.session_key(self.host, self.state.current_server)
        self.segment_sent = 0
        self.segments += 1


def _minutes_to_ms(bounds: tuple[float, float]) -> tuple[int, int]:
    return int(round(bounds[0] * MINUTE_MS)), int(round(bounds[1] * MINUTE_MS))


def _inclusive(bounds: tuple[int, int]) -> tuple[int, int]:
    return bounds[0], bounds[1] + 1


# --------------------------------------------------------------------------- #
# Attackers
# --------------------------------------------------------------------------- #
@dataclass
class AttackState:
    alphas: tuple[float, ...]
    max_rate_R: float = 100.0
    epoch_length: float = 10.0

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        if len(self.alphas) < 1:
            raise ValueError("at least one attacker required")
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ValueError(f"attack rates must lie in [0, 1], got {self.alphas}")
        if self.max_rate_R < 0 or self.epoch_length <= 0:
            raise ValueError("max_rate_R must be >= 0 and epoch_length > 0")

    @property
    def K(self) -> int:
        return len(self.alphas)


@dataclass(frozen=True)
class ForgedPacket:
    send_at_us: int
    packet: Packet


def forge_packets(
    attacker: NodeId,
    alpha: float,
    R: float,
    epoch: float,
    rng: np.random.Generator,
    *,
    destinations: Sequence[NodeId],
    keys: FlowKeyAllocator,
    start_us: int = 0,
    size: int = 1000,
) -> list[ForgedPacket]:
    """
    floor(alpha * R * epoch) packets spaced evenly over `epoch` seconds from
    `start_us`, each to a random destination and with a fresh flow key.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    count = math.floor(alpha * R * epoch + 1e-9)
    if count == 0:
        return []
    if not destinations:
        raise ValueError(f"{attacker} has no routed destinations")
    spacing_us = epoch * 1e6 / count
    picks = rng.integers(0, len(destinations), size=count)
    stream = []
    for i, pick in enumerate(picks):
        dst = destinations[int(pick)]
        packet = Packet(keys.next_forged(dst), size, attacker, dst, TrafficClass.ATTACK)
        stream.append(ForgedPacket(start_us + int(round(i * spacing_us)), packet))
    return stream


class AttackerFleet:
    """Applies an attack vector to the K attackers, one epoch at a time."""

    def __init__(
        self,
        engine: Engine,
        attackers: Sequence[NodeId],
        keys: FlowKeyAllocator,
        settings: TrafficSettings,
        seed: int,
    ):
        if not attackers:
            raise ValueError("AttackerFleet needs at least one attacker")
        self.engine = engine
        self.attackers = tuple(attackers)
        self.keys = keys
        self.settings = settings
        self.rngs = [np.random.default_rng([seed, a.id]) for a in self.attackers]
        self.destinations = [engine.topology.destinations_from(a) for a in self.attackers]
        self.state = AttackState((0.0,) * len(self.attackers), settings.max_rate_pps)
        self.packets_forged = 0

    @property
    def K(self) -> int:
        return len(self.attackers)

    def apply(self, alphas: Sequence[float], start_ms: float, epoch: float) -> int:
        """Schedule every attacker's forged stream for [start, start + epoch)."""
        self.state = AttackState(tuple(alphas), self.settings.max_rate_pps, epoch)
        if self.state.K != self.K:
            raise ValueError(f"expected {self.K} attack rates, got {self.state.K}")
        start_us = ms_to_us(start_ms)
        scheduled = 0
        for attacker, alpha, rng, dests in zip(
            self.attackers, self.state.alphas, self.rngs, self.destinations
        ):
            stream = forge_packets(
                attacker,
                alpha,
                self.state.max_rate_R,
                epoch,
                rng,
                destinations=dests,
                keys=self.keys,
                start_us=start_us,
                size=self.settings.attack_packet_bytes,
            )
            for forged in stream:
                self.engine.schedule_timer(self, forged.send_at_us, forged.packet)
            scheduled += len(stream)
        self.packets_forged += scheduled
        log.debug("Applied alphas %s at %.0f ms: %d packets", self.state.alphas, start_ms, scheduled)
        return scheduled

    def on_timer(self, engine: Engine, tag: Any) -> None:
        engine.send(tag)


def uniform_alpha_sampler(k: int) -> Callable[[np.random.Generator], tuple[float, ...]]:
    """Draws each of the k attack rates independently from U[0, 1)."""

    def sample(rng: np.random.Generator) -> tuple[float, ...]:
        return tuple(float(a) for a in rng.uniform(0.0, 1.0, size=k))

    return sample


# --------------------------------------------------------------------------- #
# Dummy background load
# --------------------------------------------------------------------------- #
@dataclass
class DummyRegulator:
    target_switch: NodeId
    target_drop_pct: float = 0.0
    allowance_pct: float = 3.0
    current_rate: float = 0.0
    adjust_interval: float = 1000.0
    gain: float = 0.1
    min_step_pps: float = 10.0
    max_rate: float = math.inf

    def __post_init__(self):
        if self.current_rate < 0:
            raise ValueError("current_rate must be >= 0")
        if self.allowance_pct < 0 or self.adjust_interval <= 0:
            raise ValueError("allowance_pct must be >= 0 and adjust_interval > 0")


def regulate_dummy(regulator: DummyRegulator, observed_drop_pct: float, now: float) -> float:
    """
    One proportional step of the background-load regulator.

    Above ``target + allowance`` the rate falls by ``gain * rate`` per point of
    excess. At or below the target it rises towards the middle of the band
    (at least `min_step_pps`, so a stopped source restarts). In between it is
    left alone.
    """
    rate = regulator.current_rate
    upper = regulator.target_drop_pct + regulator.allowance_pct
    if observed_drop_pct > upper:
        rate -= regulator.gain * rate * (observed_drop_pct - upper)
    elif observed_drop_pct <= regulator.target_drop_pct:
        aim = regulator.target_drop_pct + regulator.allowance_pct / 2.0
        rate += max(regulator.gain * rate * (aim - observed_drop_pct), regulator.min_step_pps)
    regulator.current_rate = min(max(rate, 0.0), regulator.max_rate)
    log.debug("t=%.0f ms drop %.2f%% -> dummy rate %.1f pps", now, observed_drop_pct, regulator.current_rate)
    return regulator.current_rate


class DummyFleet:
    """
    Dummy VMs sharing one regulated aggregate rate.

    The load is fluid: every adjustment spreads the current rate evenly over
    the dummies and each dummy's servers and hands the resulting per-route
    rates to `Engine.set_background_load`. No dummy packet is ever scheduled;
    the only timer is the regulator's ``("adjust", None)``.
    """

    def __init__(
        self,
        engine: Engine,
        dummies: Sequence[NodeId],
        target_switch: NodeId,
        settings: TrafficSettings,
    ):
        self.engine = engine
        self.dummies = tuple(dummies)
        self.size = settings.dummy_packet_bytes
        topology = engine.topology
        self.servers = [topology.destinations_from(d) for d in self.dummies]
        # a dummy cannot send faster than its access link
        access_pps = [
            topology.link_between(d, topology.route(d, servers[0])[0]).bandwidth / (8 * self.size)
            for d, servers in zip(self.dummies, self.servers)
        ]
        self.regulator = DummyRegulator(
            target_switch,
            settings.target_drop_pct,
            settings.allowance_pct,
            settings.dummy_initial_pps,
            settings.dummy_adjust_interval_ms,
            settings.dummy_gain,
            settings.dummy_min_step_pps,
            max_rate=sum(access_pps),
        )
        self.rate_log: list[tuple[float, float, float]] = []

    def start(self) -> None:
        if not self.dummies:
            return
        self._apply_rate()
        self.engine.schedule_timer(
            self, self.engine.clock + ms_to_us(self.regulator.adjust_interval), ("adjust", None)
        )

    def flows(self) -> dict[tuple[NodeId, NodeId], float]:
        """Offered packets/s per (dummy, server) route at the current rate."""
        per_dummy = self.regulator.current_rate / len(self.dummies)
        return {
            (dummy, server): per_dummy / len(servers)
            for dummy, servers in zip(self.dummies, self.servers)
            for server in servers
        }

    def _apply_rate(self) -> None:
        self.engine.set_background_load(self.flows(), self.size)

    def on_timer(self, engine: Engine, tag: Any) -> None:
        observed = engine.drop_rate(self.regulator.target_switch, self.regulator.adjust_interval)
        regulate_dummy(self.regulator, observed, engine.now_ms)
        self.rate_log.append((engine.now_ms, observed, self.regulator.current_rate))
        self._apply_rate()
        engine.schedule_timer(self, engine.clock + ms_to_us(self.regulator.adjust_interval), tag)


@dataclass
class TrafficSources:
    """Everything `build_sources` attached to an engine."""

    hosts: list[VideoHostSource] = field(default_factory=list)
    attackers: AttackerFleet | None = None
    dummies: DummyFleet | None = None
    keys: FlowKeyAllocator = field(default_factory=FlowKeyAllocator)


def build_sources(
    engine: Engine, settings: TrafficSettings, seed: int, *, dummies: bool = True
) -> TrafficSources:
    """Create and start all packet sources of the engine's topology."""
    topology = engine.topology
    sources = TrafficSources()
    allocator = ServerAllocator(topology.servers)
    for host in topology.hosts:
        source = VideoHostSource(host, allocator, sources.keys, settings, seed)
        source.start(engine)
        sources.hosts.append(source)
    if topology.attackers:
        sources.attackers = AttackerFleet(engine, topology.attackers, sources.keys, settings, seed)
    if dummies and topology.dummies:
        sources.dummies = DummyFleet(engine, topology.dummies, topology.target_switch, settings)
        sources.dummies.start()
    log.info(
        "Traffic: %d hosts, %d attackers, %d dummies",
        len(sources.hosts),
        len(topology.attackers),
        len(topology.dummies) if dummies else 0,
    )
    return sources
