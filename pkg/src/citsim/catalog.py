"""Service catalog: bundling, strategy contributions, applicability.

Services come in two categories: cooperative ITS services delivered
through providers, and traditional traffic-management services owned by
the road operator. Each descriptor records which end-user bundles carry
the service, which escalation strategies it can contribute to, which
network element kinds it can be placed on, its deployment scale, and
whether it is suitable for operational traffic management at all.

The catalog is immutable after load and answers all matrix queries used
by the strategy engine and the planning report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path


class EndUserType(Enum):
    DRIVER = "driver"
    VRU = "vru"
    PUBLIC_TRANSPORT = "public_transport"
    COMMERCIAL_FLEET = "commercial_fleet"
    EMERGENCY = "emergency"


class StrategyLevel(IntEnum):
    """The four escalation phases, ordered least to most severe."""

    INFORM_TRAFFIC = 1
    ENLARGE_OUTFLOW = 2
    REDUCE_INFLOW = 3
    REROUTE_TRAFFIC = 4

    @property
    def wire_name(self) -> str:
        return _LEVEL_WIRE[self]

    @classmethod
    def from_wire(cls, name: str) -> "StrategyLevel":
        for lvl, wire in _LEVEL_WIRE.items():
            if wire == name:
                return lvl
        raise ValueError(f"unknown strategy level {name!r}")


_LEVEL_WIRE = {
    StrategyLevel.INFORM_TRAFFIC: "inform_traffic",
    StrategyLevel.ENLARGE_OUTFLOW: "enlarge_outflow",
    StrategyLevel.REDUCE_INFLOW: "reduce_inflow",
    StrategyLevel.REROUTE_TRAFFIC: "reroute_traffic",
}


class ElementKind(Enum):
    CHOICE_NODE = "choice_node"
    CONTROL_NODE = "control_node"
    CHOICE_CONTROL_NODE = "choice_control_node"
    REGULAR_NODE = "regular_node"
    CONTROL_SEGMENT = "control_segment"
    LINK = "link"


class DeploymentScale(Enum):
    LARGE_SCALE = "large_scale"
    LIMITED_SCALE = "limited_scale"
    PROOF_OF_CONCEPT = "proof_of_concept"


class ControlMode(Enum):
    DIRECT_OPERATOR = "direct_operator"
    VIA_PROVIDER = "via_provider"


class ConflictResolution(Enum):
    PREFER_A = "prefer_a"
    PREFER_B = "prefer_b"
    OPERATOR_DECIDES = "operator_decides"


@dataclass(frozen=True)
class ServiceDescriptor:
    id: str
    name: str
    category: str  # "c_its" | "ttm"
    primary_objective: str
    contributions: frozenset[StrategyLevel]
    applicable_elements: frozenset[ElementKind]
    bundled_for: frozenset[EndUserType]
    deployment_scale: DeploymentScale
    control_mode: ControlMode
    tm_suitable: bool
    indirect: bool = False  # contributes only indirectly (probe data); never auto-selected
    in_area: bool = True  # part of the area's deployed service offer
    effect_profile: str = "inform_only"

    @property
    def operational(self) -> bool:
        """Eligible for automatic strategy composition."""
        return (
            self.tm_suitable
            and not self.indirect
            and self.deployment_scale is DeploymentScale.LARGE_SCALE
        )


@dataclass(frozen=True)
class ConflictRule:
    service_a: str
    service_b: str
    scope: str  # element id, "area:<name>", or "*" for network-wide
    resolution: ConflictResolution

    def involves(self, service_id: str) -> bool:
        return service_id in (self.service_a, self.service_b)


class CatalogError(Exception):
    pass


@dataclass(frozen=True)
class ServiceCatalog:
    services: dict[str, ServiceDescriptor]
    conflict_rules: tuple[ConflictRule, ...] = ()

    def get(self, service_id: str) -> ServiceDescriptor:
        if service_id not in self.services:
            raise CatalogError(f"unknown service {service_id!r}")
        return self.services[service_id]

    def bundle_for(self, end_user: EndUserType) -> list[str]:
        """Service ids bundled for one end-user type, ordered by id."""
        return sorted(
            s.id for s in self.services.values() if end_user in s.bundled_for
        )

    def services_for_strategy(
        self, level: StrategyLevel, operational_only: bool = False
    ) -> list[str]:
        """Service ids contributing to a strategy level, ordered by id.

        Indirect contributors (probe data) are never returned; with
        operational_only the result is restricted to services eligible
        for automatic composition.
        """
        out = []
        for s in self.services.values():
            if s.indirect or level not in s.contributions:
                continue
            if operational_only and not s.operational:
                continue
            out.append(s.id)
        return sorted(out)

    def applicable_services(
        self, element_kind: ElementKind, operational_only: bool = False
    ) -> list[str]:
        """Service ids placeable on a network element kind, ordered by id."""
        out = []
        for s in self.services.values():
            if element_kind not in s.applicable_elements:
                continue
            if operational_only and not s.operational:
                continue
            out.append(s.id)
        return sorted(out)

    def conflicts_for(self, service_id: str) -> list[ConflictRule]:
        return [r for r in self.conflict_rules if r.involves(service_id)]


def load_catalog(document: dict) -> ServiceCatalog:
    """Parse and validate a catalog document."""
    services: dict[str, ServiceDescriptor] = {}
    errors: list[str] = []
    for entry in document.get("services", []):
        sid = entry.get("id")
        if not sid:
            errors.append("service entry without id")
            continue
        if sid in services:
            errors.append(f"duplicate service id {sid!r}")
            continue
        try:
            services[sid] = _parse_service(entry)
        except ValueError as exc:
            errors.append(f"{sid}: {exc}")

    rules: list[ConflictRule] = []
    for entry in document.get("conflict_rules", []):
        a, b = entry.get("service_a"), entry.get("service_b")
        if a == b:
            errors.append(f"conflict rule pairs {a!r} with itself")
            continue
        for sid in (a, b):
            if sid not in services:
                errors.append(f"conflict rule references unknown service {sid!r}")
        try:
            resolution = ConflictResolution(entry.get("resolution", "operator_decides"))
        except ValueError:
            errors.append(f"unknown conflict resolution {entry.get('resolution')!r}")
            continue
        rules.append(
            ConflictRule(
                service_a=a,
                service_b=b,
                scope=entry.get("scope", "*"),
                resolution=resolution,
            )
        )
    if errors:
        raise CatalogError("invalid catalog: " + "; ".join(errors))
    return ServiceCatalog(services=services, conflict_rules=tuple(rules))


def _parse_service(entry: dict) -> ServiceDescriptor:
    try:
        contributions = frozenset(
            StrategyLevel.from_wire(c) for c in entry.get("contributions", [])
        )
        elements = frozenset(ElementKind(e) for e in entry.get("applicable_elements", []))
        bundled = frozenset(EndUserType(u) for u in entry.get("bundled_for", []))
        scale = DeploymentScale(entry.get("deployment_scale", "large_scale"))
        mode = ControlMode(entry.get("control_mode", "via_provider"))
    except ValueError as exc:
        raise ValueError(str(exc)) from exc
    return ServiceDescriptor(
        id=entry["id"],
        name=entry.get("name", entry["id"]),
        category=entry.get("category", "c_its"),
        primary_objective=entry.get("primary_objective", ""),
        contributions=contributions,
        applicable_elements=elements,
        bundled_for=bundled,
        deployment_scale=scale,
        control_mode=mode,
        tm_suitable=bool(entry.get("tm_suitable", True)),
        indirect=bool(entry.get("indirect", False)),
        in_area=bool(entry.get("in_area", True)),
        effect_profile=entry.get("effect_profile", "inform_only"),
    )


def load_catalog_file(path: str | Path) -> ServiceCatalog:
    with open(path, "r", encoding="utf-8") as fh:
        return load_catalog(json.load(fh))


def generic_catalog_path() -> Path:
    return Path(__file__).parent / "data" / "catalogs" / "generic.json"


def load_generic_catalog() -> ServiceCatalog:
    """The shipped general-purpose catalog covering all known services."""
    return load_catalog_file(generic_catalog_path())
