import pytest

from motif_cdr.errors import NodeLookupError, ParseError, ValidationError
from motif_cdr.graph import (DomainGraph, NodeKind, NodeRef, build_domain_graph, load_dataset,
                             OverlapRegistry, load_interactions, priority, read_interaction_pairs,
                             read_overlap_map, register_overlap)


@pytest.fixture
def small_graph():
    # u0: i10, i11   u1: i10
    return build_domain_graph([(0, 10), (0, 11), (1, 10), (0, 10)], domain_id=0)


def write(path, lines):
    path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    return path


class TestDomainGraph:
    def test_block_layout(self, small_graph):
        assert [str(n) for n in small_graph.nodes] == ["u0", "u1", "i10", "i11"]
        assert [n.per_domain_id for n in small_graph.nodes] == [0, 1, 2, 3]
        assert small_graph.n_users == 2 and small_graph.n_items == 2

    def test_duplicate_pairs_collapse(self, small_graph):
        assert small_graph.num_edges == 3

    def test_neighbors_and_degree(self, small_graph):
        u0 = small_graph.node(NodeKind.USER, 0)
        assert [str(n) for n in small_graph.neighbors(u0)] == ["i10", "i11"]
        assert small_graph.degree(small_graph.node(NodeKind.ITEM, 11)) == 1

    def test_priorities_break_ties_by_index(self, small_graph):
        # degrees [2, 1, 2, 1]
        assert list(small_graph.priorities) == [3, 1, 4, 2]
        assert priority(small_graph, small_graph.node(NodeKind.ITEM, 10)) == 4

    def test_biadjacency(self, small_graph):
        assert small_graph.biadjacency().toarray().tolist() == [[1.0, 1.0], [1.0, 0.0]]

    def test_without_edges_keeps_nodes(self, small_graph):
        trimmed = small_graph.without_edges([(1, 2)])
        assert trimmed.num_nodes == small_graph.num_nodes
        assert trimmed.num_edges == 2
        assert trimmed.degrees[1] == 0

    def test_unknown_node_lookup(self, small_graph):
        with pytest.raises(NodeLookupError):
            small_graph.node(NodeKind.USER, 99)

    def test_foreign_node_not_contained(self, small_graph):
        other = build_domain_graph([(5, 6)], domain_id=1)
        with pytest.raises(NodeLookupError):
            small_graph.index_of(other.nodes[0])

    def test_edge_must_join_user_and_item(self):
        users = [NodeRef(NodeKind.USER, 0, 0, 0), NodeRef(NodeKind.USER, 1, 1, 1)]
        with pytest.raises(ValidationError):
            DomainGraph(0, users, [], [(0, 1)])


class TestReadInteractions:
    def test_blank_lines_ignored(self, tmp_path):
        path = write(tmp_path / "d.tsv", ["0\t1", "", "2\t3"])
        assert read_interaction_pairs(path) == [(0, 1), (2, 3)]

    def test_non_integer_reports_line(self, tmp_path):
        path = write(tmp_path / "d.tsv", ["0\t1", "0\tx"])
        with pytest.raises(ParseError, match=":2:"):
            read_interaction_pairs(path)

    def test_negative_id_rejected(self, tmp_path):
        path = write(tmp_path / "d.tsv", ["-1\t1"])
        with pytest.raises(ParseError):
            read_interaction_pairs(path)

    def test_wrong_field_count(self, tmp_path):
        path = write(tmp_path / "d.tsv", ["0\t1\t2"])
        with pytest.raises(ParseError):
            read_interaction_pairs(path)


class TestLoadInteractions:
    def test_duplicates_collapse(self, tmp_path):
        path = write(tmp_path / "d.tsv", ["0\t1", "0\t1", "2\t1"])
        graph = load_interactions(path, domain_id=3)
        assert graph.domain_id == 3
        assert graph.num_edges == 2
        assert graph.n_users == 2 and graph.n_items == 1

    def test_empty_file_gives_empty_graph(self, tmp_path):
        path = write(tmp_path / "d.tsv", [])
        graph = load_interactions(path, domain_id=0)
        assert graph.num_nodes == 0 and graph.num_edges == 0


class TestRegisterOverlap:
    def test_ids_present_in_both(self):
        a = build_domain_graph([(0, 10)], domain_id=0)
        b = build_domain_graph([(5, 20)], domain_id=1)
        registry = register_overlap(OverlapRegistry(), a, b, {0})
        assert registry.shared(1, 0) == frozenset({0})
        assert registry.is_overlapped(1, b.node(NodeKind.USER, 5))
        assert len(registry) == 1

    def test_id_missing_from_one_side(self):
        a = build_domain_graph([(0, 10), (1, 10)], domain_id=0)
        b = build_domain_graph([(5, 20)], domain_id=1)
        with pytest.raises(ValidationError):
            register_overlap(OverlapRegistry(), a, b, {1})


class TestLoadDataset:
    @pytest.fixture
    def files(self, tmp_path):
        a = write(tmp_path / "a.tsv", ["0\t100", "0\t101", "1\t100"])
        b = write(tmp_path / "b.tsv", ["5\t200", "6\t200", "6\t201"])
        overlap = write(tmp_path / "overlap.tsv", ["user\t0\t5\t0"])
        return a, b, overlap

    def test_overlapped_user_shares_global_id(self, files):
        a, b, overlap = files
        dataset = load_dataset({0: a, 1: b}, overlap)
        assert dataset.graphs[0].node(NodeKind.USER, 0).global_id == 0
        assert dataset.graphs[1].node(NodeKind.USER, 5).global_id == 0

    def test_other_users_get_distinct_ids(self, files):
        a, b, overlap = files
        dataset = load_dataset({0: a, 1: b}, overlap)
        gids = [dataset.graphs[0].node(NodeKind.USER, 1).global_id,
                dataset.graphs[1].node(NodeKind.USER, 6).global_id]
        assert len(set(gids + [0])) == 3

    def test_overlap_registry(self, files):
        a, b, overlap = files
        dataset = load_dataset({0: a, 1: b}, overlap)
        u0 = dataset.graphs[0].node(NodeKind.USER, 0)
        u1 = dataset.graphs[0].node(NodeKind.USER, 1)
        assert dataset.is_overlapped(0, u0)
        assert not dataset.is_overlapped(0, u1)
        assert dataset.overlap.shared(0, 1) == frozenset({0})

    def test_summary(self, files):
        a, b, overlap = files
        rows = load_dataset({0: a, 1: b}, overlap).summary()
        assert rows[0] == {"domain": 0, "users": 2, "items": 2, "edges": 3, "overlapped": 1}

    def test_shared_rows_offset_items(self, files):
        a, b, overlap = files
        dataset = load_dataset({0: a, 1: b}, overlap)
        item = dataset.graphs[0].node(NodeKind.ITEM, 100)
        assert dataset.shared_row(item) == dataset.n_global_users + item.global_id

    def test_overlapped_user_missing_from_domain(self, tmp_path, files):
        a, b, _ = files
        overlap = write(tmp_path / "bad.tsv", ["user\t0\t9\t0"])
        with pytest.raises(ValidationError):
            load_dataset({0: a, 1: b}, overlap)

    def test_overlap_kind_must_match_role(self, tmp_path, files):
        a, b, _ = files
        overlap = write(tmp_path / "items.tsv", ["item\t100\t200\t0"])
        with pytest.raises(ValidationError):
            load_dataset({0: a, 1: b}, overlap)

    def test_unknown_overlap_kind(self, tmp_path):
        path = write(tmp_path / "o.tsv", ["shop\t0\t1\t2"])
        with pytest.raises(ParseError):
            read_overlap_map(path)
