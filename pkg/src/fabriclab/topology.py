"""Three-tier Clos fabric: deterministic construction and path enumeration.

Aggregation switches are grouped into ``tor_uplinks_per_rack`` planes; each
ToR has one uplink into every plane (to plane member ``rack % group_size``)
and every aggregation switch connects to every spine. Node and link ids
derive purely from the configuration, so equal configs build identical
graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

GBPS = 1e9  # bits per second


@dataclass(frozen=True)
class TopologyConfig:
    racks: int = 8
    hosts_per_rack: int = 4
    tor_uplinks_per_rack: int = 2
    agg_nodes: int = 4
    spine_nodes: int = 2
    link_capacity: float = 1 * GBPS  # bits/s per fabric link
    host_rate: float = 2 * GBPS  # bits/s a single host can source
    propagation_delay: float = 50e-6  # seconds per link
    buffer_delay: float = 0.025  # buffer sized to capacity * buffer_delay

    def validate(self) -> None:
        for name in ("racks", "hosts_per_rack", "tor_uplinks_per_rack", "agg_nodes", "spine_nodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.tor_uplinks_per_rack > self.agg_nodes:
            raise ValueError(
                f"tor_uplinks_per_rack ({self.tor_uplinks_per_rack}) cannot exceed "
                f"agg_nodes ({self.agg_nodes})"
            )
        if self.agg_nodes % self.tor_uplinks_per_rack != 0:
            raise ValueError(
                f"agg_nodes ({self.agg_nodes}) must divide evenly into "
                f"{self.tor_uplinks_per_rack} planes"
            )
        if self.link_capacity <= 0 or self.host_rate <= 0:
            raise ValueError("capacities must be strictly positive")

    @property
    def oversubscription(self) -> float:
        """Rack ingress over rack uplink capacity."""
        return (self.hosts_per_rack * self.host_rate) / (
            self.tor_uplinks_per_rack * self.link_capacity
        )

    @property
    def bisection_bandwidth(self) -> float:
        return self.racks * self.tor_uplinks_per_rack * self.link_capacity / 2.0


@dataclass
class Link:
    """One direction of a fabric cable."""

    id: str
    src: str
    dst: str
    capacity: float  # bits/s
    stage: int  # processing order: tor->agg 0, agg->spine 1, spine->agg 2, agg->tor 3
    buffer_bytes: float
    propagation_delay: float


@dataclass
class Topology:
    config: TopologyConfig
    tors: list[str]
    aggs: list[str]
    spines: list[str]
    links: dict[str, Link]  # directed
    cables: list[tuple[str, str]]  # undirected physical edges, deterministic order
    tor_uplink_aggs: dict[int, list[str]] = field(default_factory=dict)
    _path_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.tors) + len(self.aggs) + len(self.spines)

    @property
    def n_cables(self) -> int:
        return len(self.cables)

    def candidate_paths(self, src_rack: int, dst_rack: int) -> list[tuple[str, ...]]:
        """All plane-respecting up/down paths between two racks, as link-id
        sequences, in deterministic order."""
        if src_rack == dst_rack:
            return []
        key = (src_rack, dst_rack)
        cached = self._path_cache.get(key)
        if cached is not None:
            return cached
        cfg = self.config
        paths: list[tuple[str, ...]] = []
        for plane in range(cfg.tor_uplinks_per_rack):
            agg_up = self.tor_uplink_aggs[src_rack][plane]
            agg_down = self.tor_uplink_aggs[dst_rack][plane]
            tor_s, tor_d = self.tors[src_rack], self.tors[dst_rack]
            if agg_up == agg_down:
                paths.append((f"{tor_s}>{agg_up}", f"{agg_up}>{tor_d}"))
            else:
                for spine in self.spines:
                    paths.append(
                        (
                            f"{tor_s}>{agg_up}",
                            f"{agg_up}>{spine}",
                            f"{spine}>{agg_down}",
                            f"{agg_down}>{tor_d}",
                        )
                    )
        self._path_cache[key] = paths
        return paths

    def path_propagation_delay(self, path: tuple[str, ...]) -> float:
        return sum(self.links[lid].propagation_delay for lid in path)


def build_clos(cfg: TopologyConfig) -> Topology:
    """Construct the fabric graph; rejects inconsistent configurations."""
    cfg.validate()
    tors = [f"tor{r}" for r in range(cfg.racks)]
    aggs = [f"agg{a}" for a in range(cfg.agg_nodes)]
    spines = [f"spine{s}" for s in range(cfg.spine_nodes)]

    links: dict[str, Link] = {}
    cables: list[tuple[str, str]] = []
    buffer_bytes = cfg.link_capacity * cfg.buffer_delay / 8.0

    def add_cable(a: str, b: str, stage_ab: int, stage_ba: int) -> None:
        cables.append((a, b))
        for src, dst, stage in ((a, b, stage_ab), (b, a, stage_ba)):
            lid = f"{src}>{dst}"
            links[lid] = Link(
                id=lid,
                src=src,
                dst=dst,
                capacity=cfg.link_capacity,
                stage=stage,
                buffer_bytes=buffer_bytes,
                propagation_delay=cfg.propagation_delay,
            )

    group = cfg.agg_nodes // cfg.tor_uplinks_per_rack
    tor_uplink_aggs: dict[int, list[str]] = {}
    for r in range(cfg.racks):
        uplinks = []
        for plane in range(cfg.tor_uplinks_per_rack):
            agg = aggs[plane * group + (r % group)]
            uplinks.append(agg)
            add_cable(tors[r], agg, stage_ab=0, stage_ba=3)
        tor_uplink_aggs[r] = uplinks
    for agg in aggs:
        for spine in spines:
            add_cable(agg, spine, stage_ab=1, stage_ba=2)

    return Topology(
        config=cfg,
        tors=tors,
        aggs=aggs,
        spines=spines,
        links=links,
        cables=cables,
        tor_uplink_aggs=tor_uplink_aggs,
    )
