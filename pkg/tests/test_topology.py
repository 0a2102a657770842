"""Clos construction tests, including brute-force edge enumeration."""

import pytest

from fabriclab.topology import GBPS, TopologyConfig, build_clos


def enumerate_edges_oracle(cfg: TopologyConfig):
    """Independent edge enumeration straight from the adjacency rules."""
    edges = set()
    group = cfg.agg_nodes // cfg.tor_uplinks_per_rack
    for r in range(cfg.racks):
        for plane in range(cfg.tor_uplinks_per_rack):
            agg = plane * group + (r % group)
            edges.add(("tor", r, "agg", agg))
    for a in range(cfg.agg_nodes):
        for s in range(cfg.spine_nodes):
            edges.add(("agg", a, "spine", s))
    return edges


class TestBuildClos:
    def test_paper_scale_counts(self):
        cfg = TopologyConfig(
            racks=64,
            hosts_per_rack=16,
            tor_uplinks_per_rack=4,
            agg_nodes=16,
            spine_nodes=8,
            link_capacity=10 * GBPS,
            host_rate=10 * GBPS,
        )
        topo = build_clos(cfg)
        assert len(topo.tors) == 64
        assert len(topo.aggs) == 16
        assert len(topo.spines) == 8
        assert cfg.oversubscription == pytest.approx(4.0)

    def test_minimal_clos_is_chain(self):
        cfg = TopologyConfig(
            racks=1, hosts_per_rack=1, tor_uplinks_per_rack=1, agg_nodes=1, spine_nodes=1
        )
        topo = build_clos(cfg)
        assert topo.n_nodes == 3
        assert topo.n_cables == 2

    def test_desk_scale_edge_count_vs_oracle(self):
        cfg = TopologyConfig()  # 8 racks, 2 uplinks, 4 agg, 2 spines
        topo = build_clos(cfg)
        oracle = enumerate_edges_oracle(cfg)
        assert topo.n_cables == 8 * 2 + 4 * 2 == 24
        assert topo.n_cables == len(oracle)
        built = set()
        for a, b in topo.cables:
            ka = ("tor", int(a[3:])) if a.startswith("tor") else ("agg", int(a[3:]))
            kb = ("agg", int(b[3:])) if b.startswith("agg") else ("spine", int(b[5:]))
            built.add((ka[0], ka[1], kb[0], kb[1]))
        assert built == oracle

    def test_desk_default_preserves_oversubscription(self):
        cfg = TopologyConfig()
        assert cfg.oversubscription == pytest.approx(4.0)

    def test_every_tor_has_distinct_uplinks(self):
        cfg = TopologyConfig()
        topo = build_clos(cfg)
        for r in range(cfg.racks):
            uplinks = topo.tor_uplink_aggs[r]
            assert len(uplinks) == cfg.tor_uplinks_per_rack
            assert len(set(uplinks)) == len(uplinks)

    def test_rejects_bad_configs(self):
        with pytest.raises(ValueError):
            build_clos(TopologyConfig(tor_uplinks_per_rack=5, agg_nodes=4))
        with pytest.raises(ValueError):
            build_clos(TopologyConfig(link_capacity=0.0))
        with pytest.raises(ValueError):
            build_clos(TopologyConfig(racks=0))

    def test_deterministic_ids(self):
        t1 = build_clos(TopologyConfig())
        t2 = build_clos(TopologyConfig())
        assert list(t1.links) == list(t2.links)
        assert t1.cables == t2.cables


class TestPaths:
    def test_paths_share_endpoints_and_are_valid(self):
        topo = build_clos(TopologyConfig())
        for src in range(3):
            for dst in range(3):
                if src == dst:
                    continue
                paths = topo.candidate_paths(src, dst)
                assert paths
                for path in paths:
                    assert path[0].startswith(f"tor{src}>")
                    assert path[-1].endswith(f">tor{dst}")
                    # consecutive links chain node-to-node
                    for a, b in zip(path, path[1:]):
                        assert a.split(">")[1] == b.split(">")[0]

    def test_same_group_racks_have_two_hop_paths(self):
        topo = build_clos(TopologyConfig())
        paths = topo.candidate_paths(0, 2)  # same member index in each plane
        assert all(len(p) == 2 for p in paths)
        paths_cross = topo.candidate_paths(0, 1)
        assert all(len(p) == 4 for p in paths_cross)

    def test_path_count_matches_planes_and_spines(self):
        cfg = TopologyConfig()
        topo = build_clos(cfg)
        assert len(topo.candidate_paths(0, 2)) == cfg.tor_uplinks_per_rack
        assert len(topo.candidate_paths(0, 1)) == cfg.tor_uplinks_per_rack * cfg.spine_nodes
