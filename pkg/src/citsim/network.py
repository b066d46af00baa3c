"""Road network taxonomy: nodes, links, control segments, route parts.

The network is a directed graph over four node kinds. Choice nodes are
points where road users can pick between travel alternatives; control
nodes are points where directional capacity can be influenced; regular
nodes can do neither and exist only as pass-throughs inside logical
links. Control segments are capacity-adjustable sections (a rush-hour
lane), and route parts span choice node to choice node and are the unit
for travel-time problem detection.

Networks are immutable after load; a reload swaps in a new instance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable

SCHEMA_VERSION = 1


class NodeKind(Enum):
    CHOICE = "choice"
    CONTROL = "control"
    CHOICE_CONTROL = "choice_control"
    REGULAR = "regular"

    @property
    def is_choice(self) -> bool:
        return self in (NodeKind.CHOICE, NodeKind.CHOICE_CONTROL)

    @property
    def is_control(self) -> bool:
        return self in (NodeKind.CONTROL, NodeKind.CHOICE_CONTROL)


class SegmentState(Enum):
    BASE = "base"
    BOOSTED = "boosted"
    RESTRICTED = "restricted"


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    x: float
    y: float
    label: str = ""


@dataclass(frozen=True)
class Link:
    """Directed logical link; endpoints are control or choice nodes.

    Raw document edges may pass through regular nodes; the loader merges
    those chains, recording the source edge ids.
    """

    id: str
    from_node: str
    to_node: str
    length: float  # meters
    capacity: float  # vehicles/hour, whole link
    free_flow_speed: float  # km/h
    lanes: int = 1
    source_edges: tuple[str, ...] = ()

    @property
    def free_flow_time(self) -> float:
        """Unimpeded traversal time in seconds."""
        return self.length / (self.free_flow_speed / 3.6)


@dataclass(frozen=True)
class ControlSegment:
    id: str
    member_links: tuple[str, ...]
    base_capacity: float
    boost_capacity: float
    state: SegmentState = SegmentState.BASE


@dataclass(frozen=True)
class RoutePart:
    id: str
    from_choice: str
    to_choice: str
    member_links: tuple[str, ...]
    alternatives: tuple[str, ...] = ()


@dataclass(frozen=True)
class LinkThresholds:
    max_density: float  # veh/km/lane
    max_queue: float  # vehicles
    min_speed_ratio: float  # fraction of free-flow speed


@dataclass(frozen=True)
class Policy:
    """Road-function classes and quantitative problem thresholds."""

    road_function: dict[str, str] = field(default_factory=dict)
    class_defaults: dict[str, LinkThresholds] = field(default_factory=dict)
    link_thresholds: dict[str, LinkThresholds] = field(default_factory=dict)
    route_part_thresholds: dict[str, float] = field(default_factory=dict)
    route_part_default: float = 1.5

    def thresholds_for_link(self, link_id: str) -> LinkThresholds | None:
        if link_id in self.link_thresholds:
            return self.link_thresholds[link_id]
        cls = self.road_function.get(link_id)
        if cls is not None and cls in self.class_defaults:
            return self.class_defaults[cls]
        return self.class_defaults.get("default")

    def ratio_for_route_part(self, rp_id: str) -> float:
        return self.route_part_thresholds.get(rp_id, self.route_part_default)


@dataclass(frozen=True)
class Violation:
    rule: str
    element_id: str
    message: str
    severity: str = "error"  # "error" | "info"


@dataclass(frozen=True)
class RoadNetwork:
    nodes: dict[str, Node]
    links: dict[str, Link]
    control_segments: dict[str, ControlSegment]
    route_parts: dict[str, RoutePart]
    policy: Policy

    def __post_init__(self) -> None:
        out_map: dict[str, list[str]] = {}
        in_map: dict[str, list[str]] = {}
        for l in sorted(self.links.values(), key=lambda l: l.id):
            out_map.setdefault(l.from_node, []).append(l.id)
            in_map.setdefault(l.to_node, []).append(l.id)
        seg_map: dict[str, list[str]] = {}
        for s in sorted(self.control_segments.values(), key=lambda s: s.id):
            for m in s.member_links:
                seg_map.setdefault(m, []).append(s.id)
        object.__setattr__(self, "_out_map", out_map)
        object.__setattr__(self, "_in_map", in_map)
        object.__setattr__(self, "_seg_map", seg_map)

    def node_kind(self, node_id: str) -> NodeKind:
        return self.nodes[node_id].kind

    def out_links(self, node_id: str) -> list[Link]:
        return [self.links[i] for i in self._out_map.get(node_id, ())]  # type: ignore[attr-defined]

    def in_links(self, node_id: str) -> list[Link]:
        return [self.links[i] for i in self._in_map.get(node_id, ())]  # type: ignore[attr-defined]

    def segments_containing(self, link_id: str) -> list[ControlSegment]:
        return [self.control_segments[i] for i in self._seg_map.get(link_id, ())]  # type: ignore[attr-defined]


class NetworkError(Exception):
    """Raised when a network document cannot produce a usable network."""

    def __init__(self, violations: list[Violation]):
        self.violations = violations
        lines = "; ".join(f"{v.rule}[{v.element_id}]: {v.message}" for v in violations)
        super().__init__(f"invalid network: {lines}")


# ---------------------------------------------------------------------------
# Loading


def _merge_chains(
    nodes: dict[str, Node], raw_edges: list[dict]
) -> tuple[list[Link], list[Violation]]:
    """Merge raw edges across pass-through regular nodes into logical links.

    A regular node with exactly one incoming and one outgoing edge is an
    interior point of a logical link; chains are merged with summed length,
    min capacity/lanes, and length-weighted free-flow speed.
    """
    violations: list[Violation] = []
    out_by_node: dict[str, list[dict]] = {}
    in_by_node: dict[str, list[dict]] = {}
    for e in raw_edges:
        out_by_node.setdefault(e["from"], []).append(e)
        in_by_node.setdefault(e["to"], []).append(e)

    def passthrough(node_id: str) -> bool:
        node = nodes.get(node_id)
        return (
            node is not None
            and node.kind is NodeKind.REGULAR
            and len(in_by_node.get(node_id, ())) == 1
            and len(out_by_node.get(node_id, ())) == 1
        )

    links: list[Link] = []
    chains: list[list[dict]] = []
    consumed: set[str] = set()
    for e in sorted(raw_edges, key=lambda e: e["id"]):
        if e["id"] in consumed:
            continue
        if passthrough(e["from"]):
            continue  # chain interior; picked up from its head
        chain = [e]
        consumed.add(e["id"])
        while passthrough(chain[-1]["to"]):
            nxt = out_by_node[chain[-1]["to"]][0]
            if nxt["id"] in consumed:
                break  # regular-node cycle; reported by validation
            chain.append(nxt)
            consumed.add(nxt["id"])
        chains.append(chain)
    for e in sorted(raw_edges, key=lambda e: e["id"]):
        # Edges never consumed sit on a cycle of pass-through regular
        # nodes with no logical endpoint to anchor a link.
        if e["id"] not in consumed:
            violations.append(
                Violation("regular-node-cycle", e["id"], "edge lies on a cycle of regular nodes")
            )
    for chain in chains:
        length = sum(c["length"] for c in chain)
        ff_time = sum(c["length"] / (c["free_flow_speed"] / 3.6) for c in chain)
        links.append(
            Link(
                id="+".join(c["id"] for c in chain),
                from_node=chain[0]["from"],
                to_node=chain[-1]["to"],
                length=length,
                capacity=min(c["capacity"] for c in chain),
                free_flow_speed=(length / ff_time) * 3.6 if ff_time > 0 else 0.0,
                lanes=min(int(c.get("lanes", 1)) for c in chain),
                source_edges=tuple(c["id"] for c in chain),
            )
        )
    return links, violations


def _parse_thresholds(doc: dict) -> LinkThresholds:
    return LinkThresholds(
        max_density=float(doc["max_density"]),
        max_queue=float(doc["max_queue"]),
        min_speed_ratio=float(doc["min_speed_ratio"]),
    )


def load_network(document: dict) -> RoadNetwork:
    """Build a validated network from a parsed scenario network document.

    Raises NetworkError listing every violation when the document cannot
    produce a valid network.
    """
    violations: list[Violation] = []
    if document.get("schema_version") != SCHEMA_VERSION:
        raise NetworkError(
            [Violation("schema-version", "-", f"unsupported schema_version {document.get('schema_version')!r}")]
        )
    raw_nodes = document.get("nodes", [])
    raw_edges = document.get("edges", [])
    if not raw_nodes and not raw_edges:
        raise NetworkError([Violation("empty-network", "-", "empty network: no nodes and no edges")])

    nodes: dict[str, Node] = {}
    for n in raw_nodes:
        if n["id"] in nodes:
            violations.append(Violation("duplicate-id", n["id"], "duplicate node id"))
            continue
        try:
            kind = NodeKind(n["kind"])
        except ValueError:
            violations.append(Violation("unknown-node-kind", n["id"], f"unknown node kind {n['kind']!r}"))
            continue
        nodes[n["id"]] = Node(
            id=n["id"], kind=kind, x=float(n["x"]), y=float(n["y"]), label=n.get("label", "")
        )

    seen_edges: set[str] = set()
    ok_edges: list[dict] = []
    for e in raw_edges:
        if e["id"] in seen_edges:
            violations.append(Violation("duplicate-id", e["id"], "duplicate edge id"))
            continue
        seen_edges.add(e["id"])
        if e["from"] not in nodes or e["to"] not in nodes:
            violations.append(
                Violation("dangling-reference", e["id"], f"edge references unknown node {e['from'] if e['from'] not in nodes else e['to']!r}")
            )
            continue
        ok_edges.append(e)

    links_list, merge_violations = _merge_chains(nodes, ok_edges)
    violations.extend(merge_violations)
    links = {l.id: l for l in links_list}

    segments: dict[str, ControlSegment] = {}
    for s in document.get("control_segments", []):
        if s["id"] in segments:
            violations.append(Violation("duplicate-id", s["id"], "duplicate control segment id"))
            continue
        missing = [m for m in s["member_links"] if m not in links]
        if missing:
            violations.append(
                Violation("dangling-reference", s["id"], f"control segment references undefined link {missing[0]}")
            )
            continue
        segments[s["id"]] = ControlSegment(
            id=s["id"],
            member_links=tuple(s["member_links"]),
            base_capacity=float(s["base_capacity"]),
            boost_capacity=float(s["boost_capacity"]),
        )

    policy_doc = document.get("policy", {})
    policy = Policy(
        road_function=dict(policy_doc.get("road_function", {})),
        class_defaults={
            k: _parse_thresholds(v) for k, v in policy_doc.get("class_defaults", {}).items()
        },
        link_thresholds={
            k: _parse_thresholds(v) for k, v in policy_doc.get("link_thresholds", {}).items()
        },
        route_part_thresholds={
            k: float(v["max_travel_time_ratio"])
            for k, v in policy_doc.get("route_part_thresholds", {}).items()
            if k != "default"
        },
        route_part_default=float(
            policy_doc.get("route_part_thresholds", {}).get("default", {}).get("max_travel_time_ratio", 1.5)
        ),
    )

    network = RoadNetwork(
        nodes=nodes, links=links, control_segments=segments, route_parts={}, policy=policy
    )
    violations.extend(v for v in validate_network(network) if v.severity == "error")
    if violations:
        raise NetworkError(violations)
    network = derive_route_parts(network)
    return network


def serialize_network(network: RoadNetwork) -> dict:
    """Document form of a network; load_network(serialize_network(n)) round-trips."""
    policy = network.policy
    rpt: dict[str, dict] = {
        k: {"max_travel_time_ratio": v} for k, v in sorted(policy.route_part_thresholds.items())
    }
    rpt["default"] = {"max_travel_time_ratio": policy.route_part_default}
    return {
        "schema_version": SCHEMA_VERSION,
        "nodes": [
            {"id": n.id, "kind": n.kind.value, "x": n.x, "y": n.y, "label": n.label}
            for n in sorted(network.nodes.values(), key=lambda n: n.id)
        ],
        "edges": [
            {
                "id": l.id,
                "from": l.from_node,
                "to": l.to_node,
                "length": l.length,
                "capacity": l.capacity,
                "free_flow_speed": l.free_flow_speed,
                "lanes": l.lanes,
            }
            for l in sorted(network.links.values(), key=lambda l: l.id)
        ],
        "control_segments": [
            {
                "id": s.id,
                "member_links": list(s.member_links),
                "base_capacity": s.base_capacity,
                "boost_capacity": s.boost_capacity,
            }
            for s in sorted(network.control_segments.values(), key=lambda s: s.id)
        ],
        "policy": {
            "road_function": dict(sorted(policy.road_function.items())),
            "class_defaults": {
                k: {
                    "max_density": t.max_density,
                    "max_queue": t.max_queue,
                    "min_speed_ratio": t.min_speed_ratio,
                }
                for k, t in sorted(policy.class_defaults.items())
            },
            "link_thresholds": {
                k: {
                    "max_density": t.max_density,
                    "max_queue": t.max_queue,
                    "min_speed_ratio": t.min_speed_ratio,
                }
                for k, t in sorted(policy.link_thresholds.items())
            },
            "route_part_thresholds": rpt,
        },
    }


# ---------------------------------------------------------------------------
# Validation


def validate_network(network: RoadNetwork) -> list[Violation]:
    """Check every structural invariant; returns one entry per violation.

    Entries are ordered by (rule, element id). Info-severity entries (route
    part overlap) do not make the network invalid.
    """
    out: list[Violation] = []

    for link in network.links.values():
        if link.from_node not in network.nodes or link.to_node not in network.nodes:
            out.append(Violation("link-endpoint-missing", link.id, "endpoint node does not exist"))
            continue
        for end in (link.from_node, link.to_node):
            kind = network.nodes[end].kind
            if not (kind.is_choice or kind.is_control):
                out.append(
                    Violation(
                        "link-endpoint-kind",
                        link.id,
                        f"endpoint {end} is {kind.value}; links run between control/choice nodes",
                    )
                )
        if link.length <= 0 or link.capacity <= 0 or link.free_flow_speed <= 0 or link.lanes < 1:
            out.append(Violation("link-attribute-positive", link.id, "length/capacity/speed must be > 0, lanes >= 1"))

    for seg in network.control_segments.values():
        missing = [m for m in seg.member_links if m not in network.links]
        if missing:
            out.append(Violation("segment-unknown-link", seg.id, f"member link {missing[0]} does not exist"))
            continue
        for a, b in zip(seg.member_links, seg.member_links[1:]):
            if network.links[a].to_node != network.links[b].from_node:
                out.append(Violation("segment-not-a-path", seg.id, f"members {a} and {b} are not consecutive"))
                break
        if seg.boost_capacity < seg.base_capacity:
            out.append(Violation("segment-capacity-order", seg.id, "boost capacity below base capacity"))
        if seg.base_capacity <= 0:
            out.append(Violation("segment-capacity-order", seg.id, "base capacity must be > 0"))

    for rp in network.route_parts.values():
        missing = [m for m in rp.member_links if m not in network.links]
        if missing:
            out.append(Violation("route-part-unknown-link", rp.id, f"member link {missing[0]} does not exist"))
            continue
        for end in (rp.from_choice, rp.to_choice):
            if end not in network.nodes or not network.nodes[end].kind.is_choice:
                out.append(Violation("route-part-endpoint-kind", rp.id, f"endpoint {end} is not a choice node"))
        chain_ok = all(
            network.links[a].to_node == network.links[b].from_node
            for a, b in zip(rp.member_links, rp.member_links[1:])
        )
        if not chain_ok or not rp.member_links:
            out.append(Violation("route-part-not-a-path", rp.id, "member links are not a connected path"))
        else:
            if network.links[rp.member_links[0]].from_node != rp.from_choice or (
                network.links[rp.member_links[-1]].to_node != rp.to_choice
            ):
                out.append(Violation("route-part-not-a-path", rp.id, "path does not span the stated endpoints"))
            interior = [network.links[m].to_node for m in rp.member_links[:-1]]
            for node_id in interior:
                if network.nodes[node_id].kind.is_choice:
                    out.append(
                        Violation("route-part-interior-choice", rp.id, f"interior node {node_id} is a choice node")
                    )

    referenced = {l.from_node for l in network.links.values()} | {
        l.to_node for l in network.links.values()
    }
    if referenced and not _weakly_connected(referenced, network.links.values()):
        out.append(Violation("network-not-weakly-connected", "-", "link graph is not weakly connected"))

    pol = network.policy
    all_thresholds = list(pol.class_defaults.items()) + list(pol.link_thresholds.items())
    for key, t in all_thresholds:
        if t.max_density <= 0 or t.max_queue <= 0:
            out.append(Violation("policy-threshold-invalid", key, "thresholds must be strictly positive"))
        if not (0 < t.min_speed_ratio <= 1):
            out.append(Violation("policy-threshold-invalid", key, "min_speed_ratio must be in (0, 1]"))
    for key, ratio in list(pol.route_part_thresholds.items()) + [("default", pol.route_part_default)]:
        if ratio < 1:
            out.append(Violation("policy-threshold-invalid", key, "max_travel_time_ratio must be >= 1"))
    for link_id in list(pol.road_function) + list(pol.link_thresholds):
        if link_id not in network.links:
            out.append(Violation("policy-unknown-element", link_id, "policy references unknown link"))

    # Overlapping route parts are legal but worth surfacing.
    link_to_rps: dict[str, list[str]] = {}
    for rp in network.route_parts.values():
        for m in rp.member_links:
            link_to_rps.setdefault(m, []).append(rp.id)
    for link_id, rp_ids in sorted(link_to_rps.items()):
        if len(rp_ids) > 1:
            out.append(
                Violation(
                    "route-part-overlap",
                    link_id,
                    f"link shared by route parts {', '.join(sorted(rp_ids))}",
                    severity="info",
                )
            )

    out.sort(key=lambda v: (v.rule, v.element_id, v.message))
    return out


def is_valid(report: Iterable[Violation]) -> bool:
    return not any(v.severity == "error" for v in report)


def _weakly_connected(node_ids: set[str], links: Iterable[Link]) -> bool:
    adjacency: dict[str, set[str]] = {n: set() for n in node_ids}
    for l in links:
        adjacency.setdefault(l.from_node, set()).add(l.to_node)
        adjacency.setdefault(l.to_node, set()).add(l.from_node)
    start = next(iter(sorted(node_ids)))
    seen = {start}
    stack = [start]
    while stack:
        for nb in adjacency[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return seen >= node_ids


# ---------------------------------------------------------------------------
# Route part derivation


def derive_route_parts(network: RoadNetwork) -> RoadNetwork:
    """Derive every route part: maximal directed paths between choice nodes
    whose interior nodes are all non-choice. Idempotent.

    Raises NetworkError("unterminated-route-part") when a cycle of
    non-choice nodes is reachable from a choice node, because such a path
    can never reach a terminating choice node.
    """
    paths: list[tuple[str, ...]] = []

    def extend(path: list[str], interior_nodes: set[str]) -> None:
        tail = network.links[path[-1]].to_node
        if network.nodes[tail].kind.is_choice:
            paths.append(tuple(path))
            return
        if tail in interior_nodes:
            raise NetworkError(
                [Violation("unterminated-route-part", tail, "cycle of non-choice nodes reachable from a choice node")]
            )
        for nxt in sorted(network.out_links(tail), key=lambda l: l.id):
            extend(path + [nxt.id], interior_nodes | {tail})

    choice_nodes = sorted(
        n.id for n in network.nodes.values() if n.kind.is_choice
    )
    for start in choice_nodes:
        for first in sorted(network.out_links(start), key=lambda l: l.id):
            extend([first.id], set())

    by_endpoints: dict[tuple[str, str], list[str]] = {}
    parts: dict[str, RoutePart] = {}
    for members in sorted(paths):
        frm = network.links[members[0]].from_node
        to = network.links[members[-1]].to_node
        rp_id = _route_part_id(frm, to, members)
        parts[rp_id] = RoutePart(id=rp_id, from_choice=frm, to_choice=to, member_links=members)
        by_endpoints.setdefault((frm, to), []).append(rp_id)

    for (frm, to), ids in by_endpoints.items():
        if len(ids) > 1:
            for rp_id in ids:
                parts[rp_id] = replace(
                    parts[rp_id],
                    alternatives=tuple(sorted(i for i in ids if i != rp_id)),
                )

    return replace(network, route_parts=parts)


def _route_part_id(from_choice: str, to_choice: str, members: tuple[str, ...]) -> str:
    import hashlib

    tag = hashlib.sha256("|".join(members).encode()).hexdigest()[:6]
    return f"rp:{from_choice}:{to_choice}:{tag}"


def shortest_path(
    network: RoadNetwork,
    origin: str,
    destination: str,
    cost: dict[str, float] | None = None,
) -> list[str] | None:
    """Dijkstra over links; cost defaults to free-flow time. Returns link ids."""
    import heapq

    if origin == destination:
        return []
    costs = cost or {l.id: l.free_flow_time for l in network.links.values()}
    best: dict[str, float] = {origin: 0.0}
    back: dict[str, str] = {}
    heap: list[tuple[float, str]] = [(0.0, origin)]
    while heap:
        dist, node = heapq.heappop(heap)
        if node == destination:
            break
        if dist > best.get(node, float("inf")):
            continue
        for link in sorted(network.out_links(node), key=lambda l: l.id):
            nd = dist + costs[link.id]
            if nd < best.get(link.to_node, float("inf")):
                best[link.to_node] = nd
                back[link.to_node] = link.id
                heapq.heappush(heap, (nd, link.to_node))
    if destination not in back:
        return None
    path: list[str] = []
    node = destination
    while node != origin:
        link_id = back[node]
        path.append(link_id)
        node = network.links[link_id].from_node
    path.reverse()
    return path


def load_network_file(path: str | Path) -> RoadNetwork:
    with open(path, "r", encoding="utf-8") as fh:
        return load_network(json.load(fh))
