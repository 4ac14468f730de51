import networkx as nx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TRIANGLE_TEXT, make_topology
from esotn.topology import (
    TopologyParseError,
    TopologyValidationError,
    compute_candidate_paths,
    k_shortest_paths,
    load_bundled_topology,
    load_topology,
)


def to_networkx(topo):
    graph = nx.Graph()
    graph.add_nodes_from(range(topo.node_count))
    for link_id, (a, b, _) in enumerate(topo.links):
        graph.add_edge(a, b, link=link_id)
    return graph


def links_to_nodes(topo, src, links):
    """Walk a link-id sequence from src, returning the visited nodes."""
    nodes = [src]
    for link_id in links:
        a, b = topo.link_endpoints(link_id)
        assert nodes[-1] in (a, b), "link does not touch the walk head"
        nodes.append(b if nodes[-1] == a else a)
    return nodes


class TestLoadTopology:
    def test_triangle(self):
        topo = load_topology(TRIANGLE_TEXT, name="triangle")
        assert topo.node_count == 3
        assert len(topo.links) == 3
        assert topo.capacities.tolist() == [10.0, 10.0, 10.0]

    def test_zero_capacity_rejected(self):
        text = "nodes 2\nlink 0 1 0\n"
        with pytest.raises(TopologyValidationError, match="link 0.*capacity"):
            load_topology(text)

    def test_self_loop_rejected(self):
        with pytest.raises(TopologyValidationError, match="self-loop"):
            load_topology("nodes 2\nlink 1 1 5\n")

    def test_duplicate_link_rejected(self):
        with pytest.raises(TopologyValidationError, match="link 1.*duplicates link 0"):
            load_topology("nodes 2\nlink 0 1 5\nlink 1 0 5\n")

    def test_out_of_range_node_rejected(self):
        with pytest.raises(TopologyValidationError, match="node 5"):
            load_topology("nodes 3\nlink 0 5 5\n")

    def test_disconnected_rejected(self):
        text = "nodes 4\nlink 0 1 5\nlink 2 3 5\n"
        with pytest.raises(TopologyValidationError, match="disconnected.*node 2"):
            load_topology(text)

    def test_malformed_first_line(self):
        with pytest.raises(TopologyParseError, match="line 1"):
            load_topology("link 0 1 5\n")

    def test_unknown_directive(self):
        with pytest.raises(TopologyParseError, match="unknown directive"):
            load_topology("nodes 2\nedge 0 1 5\n")

    def test_bad_field_types(self):
        with pytest.raises(TopologyParseError, match="bad link fields"):
            load_topology("nodes 2\nlink 0 one 5\n")

    def test_comments_and_blanks_ignored(self):
        text = "# header\n\nnodes 2\n# mid\nlink 0 1 3\n"
        assert len(load_topology(text).links) == 1

    def test_bundled_nsfnet(self):
        topo = load_bundled_topology("nsfnet")
        assert topo.node_count == 14
        assert len(topo.links) == 21

    def test_bundled_geant2(self):
        topo = load_bundled_topology("geant2")
        assert topo.node_count == 24
        assert len(topo.links) == 37


class TestCandidatePaths:
    def test_triangle_pair(self, triangle):
        table = compute_candidate_paths(triangle, 2)
        # direct link first (1 hop), then the two-hop alternative
        direct = next(i for i, (a, b, _) in enumerate(triangle.links) if {a, b} == {0, 2})
        paths = table.paths_for(0, 2)
        assert paths[0] == (direct,)
        assert len(paths) == 2
        assert len(paths[1]) == 2

    def test_path_graph_single_route(self):
        topo = make_topology(3, [(0, 1, 5.0), (1, 2, 5.0)])
        table = compute_candidate_paths(topo, 4)
        assert table.paths_for(0, 2) == ((0, 1),)

    def test_nsfnet_every_pair_has_k_paths(self):
        topo = load_bundled_topology("nsfnet")
        table = compute_candidate_paths(topo, 4)
        assert len(table.entries) == 14 * 13
        assert all(len(paths) == 4 for paths in table.entries.values())

    def test_matches_exhaustive_enumeration_on_triangle(self, triangle):
        # Oracle: enumerate all simple paths with networkx, order by
        # (hops, link sequence), truncate to k.
        graph = to_networkx(triangle)
        table = compute_candidate_paths(triangle, 3)
        for (src, dst), got in table.entries.items():
            expected = []
            for node_path in nx.all_simple_paths(graph, src, dst):
                links = tuple(
                    graph[u][v]["link"] for u, v in zip(node_path, node_path[1:])
                )
                expected.append(links)
            expected.sort(key=lambda links: (len(links), links))
            assert list(got) == expected[:3]

    def test_matches_exhaustive_enumeration_on_nsfnet_sample(self):
        topo = load_bundled_topology("nsfnet")
        graph = to_networkx(topo)
        table = compute_candidate_paths(topo, 4)
        for src, dst in [(0, 13), (3, 8), (11, 2)]:
            expected = []
            for node_path in nx.all_simple_paths(graph, src, dst):
                links = tuple(
                    graph[u][v]["link"] for u, v in zip(node_path, node_path[1:])
                )
                expected.append(links)
            expected.sort(key=lambda links: (len(links), links))
            assert list(table.paths_for(src, dst)) == expected[:4]

    def test_reconstruction_walks_src_to_dst(self):
        topo = load_bundled_topology("nsfnet")
        table = compute_candidate_paths(topo, 4)
        for (src, dst), paths in table.entries.items():
            for links in paths:
                nodes = links_to_nodes(topo, src, links)
                assert nodes[-1] == dst
                assert len(set(nodes)) == len(nodes), "path revisits a node"

    def test_first_path_is_bfs_shortest(self):
        topo = load_bundled_topology("geant2")
        graph = to_networkx(topo)
        table = compute_candidate_paths(topo, 2)
        for (src, dst), paths in table.entries.items():
            assert len(paths[0]) == nx.shortest_path_length(graph, src, dst)

    def test_deterministic(self):
        topo = load_bundled_topology("nsfnet")
        a = compute_candidate_paths(topo, 4)
        b = compute_candidate_paths(topo, 4)
        assert a == b
        assert list(a.entries) == list(b.entries)

    def test_no_duplicate_paths_per_pair(self):
        topo = load_bundled_topology("nsfnet")
        table = compute_candidate_paths(topo, 4)
        for paths in table.entries.values():
            assert len(set(paths)) == len(paths)

    def test_k_below_one_rejected(self, triangle):
        with pytest.raises(ValueError, match="k must be"):
            compute_candidate_paths(triangle, 0)

    def test_path_arrays_mirror_entries(self, triangle):
        table = compute_candidate_paths(triangle, 2)
        for (src, dst), paths in table.entries.items():
            arrays = table.path_arrays(src, dst)
            assert [tuple(a.tolist()) for a in arrays] == list(paths)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=13), st.integers(min_value=0, max_value=13),
       st.integers(min_value=1, max_value=6))
def test_k_shortest_sorted_by_hops_then_lex(src, dst, k):
    topo = load_bundled_topology("nsfnet")
    if src == dst:
        return
    paths = k_shortest_paths(topo, src, dst, k)
    keys = [(len(p), p) for p in paths]
    assert keys == sorted(keys)
