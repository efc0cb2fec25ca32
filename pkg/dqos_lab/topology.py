"""
Static description of the simulated software-defined edge-cloud network.

A `Topology` holds nodes, links, the fixed host-to-server routes and the
controller round-trip time charged on every table miss. It is immutable once
built; all simulation state lives in `dqos_lab.simcore`.

The built-in `default_topology()` mirrors the three-site testbed: two host
edge sites (video hosts, attackers, dummy VMs) and one server site whose
entry switch, ``switch34``, is the monitored switch.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

log = logging.getLogger(__name__)

MBPS = 1_000_000.0
DEFAULT_CONTROLLER_RTT_MS = 68.0
SWITCH_LINK_MBPS = 100.0
ACCESS_LINK_MBPS = 50.0


class TopologyError(ValueError):
    """Raised when a topology violates one of its structural invariants."""


class UnknownRoute(KeyError):
    """Raised when no route is configured for a (src, dst) pair."""


class NodeKind(str, Enum):
    HOST = "host"
    SERVER = "server"
    SWITCH = "switch"
    CONTROLLER = "controller"
    ATTACKER = "attacker"
    DUMMY = "dummy"


@dataclass(frozen=True, order=True)
class NodeId:
    """A node of the network. Identity and ordering use the numeric id only."""

    id: int
    kind: NodeKind = field(compare=False)
    name: str = field(compare=False)

    def __post_init__(self):
        if self.id < 0:
            raise ValueError(f"Node id must be non-negative, got {self.id}")

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Link:
    """Undirected full-duplex link; bandwidth in bits/s, delay in ms."""

    endpoints: tuple[NodeId, NodeId]
    bandwidth: float
    propagation_delay: float

    def __post_init__(self):
        a, b = self.endpoints
        if a == b:
            raise ValueError(f"Self-loop link on {a.name}")
        if self.bandwidth <= 0:
            raise ValueError(f"Link {a.name}-{b.name}: bandwidth must be > 0")
        if self.propagation_delay < 0:
            raise ValueError(f"Link {a.name}-{b.name}: delay must be >= 0")

    @property
    def link_id(self) -> str:
        a, b = sorted(self.endpoints)
        return f"{a.name}-{b.name}"

    def other(self, node: NodeId) -> NodeId:
        a, b = self.endpoints
        return b if node == a else a


NodeRef = NodeId | str


@dataclass(frozen=True)
class Topology:
    nodes: tuple[NodeId, ...]
    links: tuple[Link, ...]
    routes: Mapping[tuple[NodeId, NodeId], tuple[NodeId, ...]]
    controller_rtt: float
    target_switch: NodeId
    _by_name: Mapping[str, NodeId] = field(init=False, repr=False, compare=False)
    _links_by_pair: Mapping[frozenset, Link] = field(
        init=False, repr=False, compare=False
    )
    _next_hops: Mapping[tuple[NodeId, NodeId, NodeId], NodeId] = field(
        init=False, repr=False, compare=False
    )

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes)))
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(
            self,
            "routes",
            {k: tuple(v) for k, v in dict(self.routes).items()},
        )
        self._validate_nodes()
        self._index_links()
        self._validate_routes()
        self._index_next_hops()
        if self.controller_rtt < 0:
            raise TopologyError("controller_rtt must be >= 0")

    # ------------------------------------------------------------------ #
    # Validation
    # ------------------------------------------------------------------ #
    def _validate_nodes(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise TopologyError("Node ids must be unique")
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise TopologyError("Node names must be unique")
        controllers = [n for n in self.nodes if n.kind is NodeKind.CONTROLLER]
        if len(controllers) != 1:
            raise TopologyError(
                f"Exactly one controller required, found {len(controllers)}"
            )
        if self.target_switch.kind is not NodeKind.SWITCH:
            raise TopologyError(f"target_switch {self.target_switch} is not a switch")
        object.__setattr__(
            self, "_by_name", {n.name: n for n in self.nodes}
        )

    def _index_links(self) -> None:
        pairs: dict[frozenset, Link] = {}
        known = set(self.nodes)
        for link in self.links:
            a, b = link.endpoints
            if a not in known or b not in known:
                raise TopologyError(f"Link {link.link_id} references unknown node")
            pair = frozenset(link.endpoints)
            if pair in pairs:
                raise TopologyError(f"Duplicate link {link.link_id}")
            pairs[pair] = link
        object.__setattr__(self, "_links_by_pair", dict(pairs))

    def _validate_routes(self) -> None:
        for (src, dst), switches in self.routes.items():
            if not switches:
                raise TopologyError(f"Empty route {src}->{dst}")
            if any(s.kind is not NodeKind.SWITCH for s in switches):
                raise TopologyError(f"Route {src}->{dst} contains a non-switch hop")
            hops = (src, *switches, dst)
            for a, b in zip(hops, hops[1:]):
                if frozenset((a, b)) not in self._links_by_pair:
                    raise TopologyError(f"Route {src}->{dst}: no link {a}-{b}")
            if (
                src.kind is NodeKind.HOST
                and dst.kind is NodeKind.SERVER
                and self.target_switch not in switches
            ):
                raise TopologyError(
                    f"Route {src}->{dst} bypasses target switch {self.target_switch}"
                )

    def _index_next_hops(self) -> None:
        next_hops = {}
        for (src, dst), switches in self.routes.items():
            hops = (src, *switches, dst)
            for here, nxt in zip(hops, hops[1:]):
                next_hops[(src, dst, here)] = nxt
        object.__setattr__(self, "_next_hops", dict(next_hops))

    # ------------------------------------------------------------------ #
    # Lookups
    # ------------------------------------------------------------------ #
    def node(self, ref: NodeRef) -> NodeId:
        if isinstance(ref, NodeId):
            return ref
        try:
            return self._by_name[ref]
        except KeyError:
            raise TopologyError(f"Unknown node {ref!r}") from None

    def nodes_of(self, kind: NodeKind) -> tuple[NodeId, ...]:
        return tuple(n for n in self.nodes if n.kind is kind)

    @property
    def controller(self) -> NodeId:
        return self.nodes_of(NodeKind.CONTROLLER)[0]

    @property
    def switches(self) -> tuple[NodeId, ...]:
        return self.nodes_of(NodeKind.SWITCH)

    @property
    def hosts(self) -> tuple[NodeId, ...]:
        return self.nodes_of(NodeKind.HOST)

    @property
    def servers(self) -> tuple[NodeId, ...]:
        return self.nodes_of(NodeKind.SERVER)

    @property
    def attackers(self) -> tuple[NodeId, ...]:
        return self.nodes_of(NodeKind.ATTACKER)

    @property
    def dummies(self) -> tuple[NodeId, ...]:
        return self.nodes_of(NodeKind.DUMMY)

    def route(self, src: NodeRef, dst: NodeRef) -> tuple[NodeId, ...]:
        key = (self.node(src), self.node(dst))
        try:
            return self.routes[key]
        except KeyError:
            raise UnknownRoute(f"No route {key[0]}->{key[1]}") from None

    def next_hop(self, src: NodeId, dst: NodeId, at: NodeId) -> NodeId:
        """Node following `at` on the (src, dst) route."""
        try:
            return self._next_hops[(src, dst, at)]
        except KeyError:
            raise UnknownRoute(f"{at} is not on route {src}->{dst}") from None

    def link_between(self, a: NodeRef, b: NodeRef) -> Link:
        pair = frozenset((self.node(a), self.node(b)))
        try:
            return self._links_by_pair[pair]
        except KeyError:
            raise TopologyError(f"No link between {a} and {b}") from None

    def destinations_from(self, src: NodeId) -> tuple[NodeId, ...]:
        return tuple(sorted(dst for (s, dst) in self.routes if s == src))

    def connections(self) -> tuple[tuple[NodeId, NodeId], ...]:
        """Sorted host->server pairs that have a route."""
        return tuple(
            sorted(
                (src, dst)
                for (src, dst) in self.routes
                if src.kind is NodeKind.HOST and dst.kind is NodeKind.SERVER
            )
        )

    def switch_links(self) -> tuple[Link, ...]:
        """Switch-to-switch links sorted by link id."""
        inner = [
            link
            for link in self.links
            if all(n.kind is NodeKind.SWITCH for n in link.endpoints)
        ]
        return tuple(sorted(inner, key=lambda link: tuple(sorted(link.endpoints))))

    def fingerprint(self) -> str:
        canonical = json.dumps(dump_topology(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def route(topology: Topology, src: NodeRef, dst: NodeRef) -> tuple[NodeId, ...]:
    """Static routing lookup; raises UnknownRoute when the pair is absent."""
    return topology.route(src, dst)


# --------------------------------------------------------------------------- #
# Builders
# --------------------------------------------------------------------------- #
class _Builder:
    """Small helper used by the built-in topologies and the JSON loader."""

    def __init__(self):
        self.nodes: dict[str, NodeId] = {}
        self.links: list[Link] = []
        self.routes: dict[tuple[NodeId, NodeId], tuple[NodeId, ...]] = {}

    def add(self, name: str, kind: NodeKind, node_id: int | None = None) -> NodeId:
        if name in self.nodes:
            raise TopologyError(f"Duplicate node name {name!r}")
        nid = len(self.nodes) if node_id is None else node_id
        node = NodeId(nid, kind, name)
        self.nodes[name] = node
        return node

    def link(self, a: str, b: str, mbps: float, delay_ms: float) -> None:
        try:
            ends = (self.nodes[a], self.nodes[b])
        except KeyError as exc:
            raise TopologyError(f"Link references unknown node {exc.args[0]!r}") from None
        self.links.append(Link(ends, mbps * MBPS, delay_ms))

    def route(self, src: str, dst: str, switches: Iterable[str]) -> None:
        try:
            key = (self.nodes[src], self.nodes[dst])
            self.routes[key] = tuple(self.nodes[s] for s in switches)
        except KeyError as exc:
            raise TopologyError(f"Route references unknown node {exc.args[0]!r}") from None

    def build(self, controller_rtt: float, target: str) -> Topology:
        if target not in self.nodes:
            raise TopologyError(f"Unknown target switch {target!r}")
        return Topology(
            nodes=tuple(self.nodes.values()),
            links=tuple(self.links),
            routes=self.routes,
            controller_rtt=controller_rtt,
            target_switch=self.nodes[target],
        )


# Link delays of the default fabric. The WAN hop dominates the
# no-attack frame latency (about 55 ms for a 1250-byte frame).
_LAN_DELAY_MS = 0.5
_WAN_DELAY_MS = 52.0

_SITE_SWITCHES = {
    "site1": ("switch11", "switch12", "switch13"),
    "site2": ("switch21", "switch22", "switch23"),
}
_SERVER_SWITCHES = ("switch31", "switch32", "switch33", "switch34")
_ATTACHMENTS = {
    "host1": "switch11",
    "host2": "switch11",
    "host3": "switch11",
    "host4": "switch21",
    "host5": "switch21",
    "host6": "switch21",
    "attacker1": "switch11",
    "attacker2": "switch12",
    "attacker3": "switch22",
    "dummy1": "switch12",
    "dummy2": "switch22",
}
_SERVER_ATTACHMENTS = {
    "server1": "switch31",
    "server2": "switch31",
    "server3": "switch32",
    "server4": "switch32",
}


def default_topology(controller_rtt_ms: float = DEFAULT_CONTROLLER_RTT_MS) -> Topology:
    """
    The built-in three-site fabric.

    Ten switches: ``switch11..13`` and ``switch21..23`` at the two host
    sites (``switch13``/``switch23`` are the site gateways), and
    ``switch31..34`` at the server site, where ``switch34`` is the entry
    switch and ``switch33`` aggregates towards the two server racks
    (``switch31``, ``switch32``). Switch-to-switch links run at 100 Mbps,
    every other link at 50 Mbps.
    """
    b = _Builder()
    b.add("controller", NodeKind.CONTROLLER)
    for name in (*_SITE_SWITCHES["site1"], *_SITE_SWITCHES["site2"], *_SERVER_SWITCHES):
        b.add(name, NodeKind.SWITCH)
    for name in _ATTACHMENTS:
        kind = NodeKind(name.rstrip("0123456789"))
        b.add(name, kind)
    for name in _SERVER_ATTACHMENTS:
        b.add(name, NodeKind.SERVER)

    for site in _SITE_SWITCHES.values():
        edge_a, edge_b, gateway = site
        b.link(edge_a, gateway, SWITCH_LINK_MBPS, _LAN_DELAY_MS)
        b.link(edge_b, gateway, SWITCH_LINK_MBPS, _LAN_DELAY_MS)
        b.link(gateway, "switch34", SWITCH_LINK_MBPS, _WAN_DELAY_MS)
    b.link("switch34", "switch33", SWITCH_LINK_MBPS, _LAN_DELAY_MS)
    b.link("switch33", "switch31", SWITCH_LINK_MBPS, _LAN_DELAY_MS)
    b.link("switch33", "switch32", SWITCH_LINK_MBPS, _LAN_DELAY_MS)
    for name, edge in {**_ATTACHMENTS, **_SERVER_ATTACHMENTS}.items():
        b.link(name, edge, ACCESS_LINK_MBPS, _LAN_DELAY_MS)

    gateway_of = {
        edge: site[2] for site in _SITE_SWITCHES.values() for edge in site[:2]
    }
    for src, edge in _ATTACHMENTS.items():
        for dst, rack in _SERVER_ATTACHMENTS.items():
            b.route(src, dst, (edge, gateway_of[edge], "switch34", "switch33", rack))

    return b.build(controller_rtt_ms, "switch34")


def _chain_topology(delays_ms: tuple[float, float, float, float], controller_rtt_ms: float) -> Topology:
    b = _Builder()
    b.add("controller", NodeKind.CONTROLLER)
    for name in ("switch1", "switch2", "switch3"):
        b.add(name, NodeKind.SWITCH)
    b.add("host1", NodeKind.HOST)
    b.add("server1", NodeKind.SERVER)
    hops = ("host1", "switch1", "switch2", "switch3", "server1")
    speeds = (ACCESS_LINK_MBPS, SWITCH_LINK_MBPS, SWITCH_LINK_MBPS, ACCESS_LINK_MBPS)
    for (a, c), mbps, delay in zip(zip(hops, hops[1:]), speeds, delays_ms):
        b.link(a, c, mbps, delay)
    b.route("host1", "server1", hops[1:-1])
    return b.build(controller_rtt_ms, "switch3")


def same_site_topology(controller_rtt_ms: float = DEFAULT_CONTROLLER_RTT_MS) -> Topology:
    """Three switches at one site; a 1250-byte frame crosses in exactly 10 ms."""
    return _chain_topology((2.35, 2.35, 2.35, 2.35), controller_rtt_ms)


def multi_site_topology(controller_rtt_ms: float = DEFAULT_CONTROLLER_RTT_MS) -> Topology:
    """The same chain spread over sites; a 1250-byte frame crosses in 66 ms."""
    return _chain_topology((0.5, 32.2, 32.2, 0.5), controller_rtt_ms)


# --------------------------------------------------------------------------- #
# JSON form
# --------------------------------------------------------------------------- #
def dump_topology(topology: Topology) -> dict[str, Any]:
    """Canonical JSON-ready form, the format read by `load_topology`."""
    return {
        "controller_rtt_ms": topology.controller_rtt,
        "target_switch": topology.target_switch.name,
        "nodes": [
            {"id": n.id, "name": n.name, "kind": n.kind.value} for n in topology.nodes
        ],
        "links": [
            {
                "endpoints": [link.endpoints[0].name, link.endpoints[1].name],
                "bandwidth_mbps": link.bandwidth / MBPS,
                "delay_ms": link.propagation_delay,
            }
            for link in topology.links
        ],
        "routes": [
            {"src": src.name, "dst": dst.name, "switches": [s.name for s in path]}
            for (src, dst), path in sorted(topology.routes.items())
        ],
    }


def topology_from_dict(data: Mapping[str, Any]) -> Topology:
    try:
        b = _Builder()
        for entry in data["nodes"]:
            b.add(entry["name"], NodeKind(entry["kind"]), int(entry["id"]))
        for entry in data["links"]:
            a, c = entry["endpoints"]
            b.link(a, c, float(entry["bandwidth_mbps"]), float(entry["delay_ms"]))
        for entry in data["routes"]:
            b.route(entry["src"], entry["dst"], entry["switches"])
        rtt = float(data.get("controller_rtt_ms", DEFAULT_CONTROLLER_RTT_MS))
        return b.build(rtt, data["target_switch"])
    except KeyError as exc:
        raise TopologyError(f"Topology config missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, TopologyError):
            raise
        raise TopologyError(f"Invalid topology config: {exc}") from None


def load_topology(path: str) -> Topology:
    """Read a topology JSON file (the format written by ``topology --dump``)."""
    log.info("Loading topology from %s", path)
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    topology = topology_from_dict(data)
    log.debug(
        "Topology %s: %d nodes, %d links, %d routes",
        topology.fingerprint()[:12],
        len(topology.nodes),
        len(topology.links),
        len(topology.routes),
    )
    return topology
