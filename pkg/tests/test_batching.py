"""Tests for pidsbench.batching."""

import pytest

from pidsbench.batching import (
    BatchOrigin,
    LastNeighborBuffers,
    apply_batching,
    build_neighbor_index,
    global_batch,
    inter_batch,
    intra_batch,
    neighbor_k,
    read_batches,
    read_neighbors,
    wants_neighbor_index,
    write_batches,
    write_neighbors,
)
from pidsbench.errors import BatchingError
from pidsbench.ingest import NS_PER_MINUTE

from .conftest import make_graph

W = 15 * NS_PER_MINUTE


def window(index, n_edges, nodes=("a", "b", "c")):
    start = index * W
    edges = [(nodes[i % len(nodes)], nodes[(i + 1) % len(nodes)], "read", start + i * NS_PER_MINUTE)
             for i in range(n_edges)]
    return make_graph(edges, start=start, end=start + W)


def brute_force_neighbors(batches, k):
    """Quadratic scan: for each batch, earlier insertions older than its start, newest k first."""
    out = []
    history = []
    for b in batches:
        g = b.graph
        snap = {}
        for node in {e.id for e in g.nodes.values()}:
            entries = [(other, ts, op) for (n, other, ts, op) in history if n == node and ts < g.window_start]
            snap[node] = entries[-k:][::-1]
        out.append(snap)
        for e in g.edges:
            src, dst = g.nodes[e.src].id, g.nodes[e.dst].id
            history.append((src, dst, e.ts, e.op))
            if src != dst:
                history.append((dst, src, e.ts, e.op))
    return out


class TestGlobalBatch:
    def test_edge_chunks(self):
        windows = [window(0, 5), window(1, 5), window(2, 5)]
        batches = global_batch(windows, "edges", 4)
        assert [len(b.graph.edges) for b in batches] == [4, 4, 4, 3]
        assert batches[0].graph.window_start == 0
        assert batches[-1].graph.window_end == 3 * W
        assert batches[1].membership == [0, 1, 1, 1]
        assert all(b.origin is BatchOrigin.GLOBAL for b in batches)

    def test_every_edge_once_in_order(self):
        windows = [window(0, 5), window(1, 7)]
        batches = global_batch(windows, "edges", 3)
        flat = [e for b in batches for e in b.graph.edges]
        assert flat == sorted((e for w in windows for e in w.edges), key=lambda e: (e.ts, e.event_id))

    def test_minute_chunks(self):
        windows = [window(0, 15), window(1, 15), window(2, 15)]
        batches = global_batch(windows, "minutes", 10)
        assert len(batches) == 5
        assert all(b.graph.window_end - b.graph.window_start <= 10 * NS_PER_MINUTE for b in batches)

    def test_no_edges(self):
        with pytest.raises(BatchingError):
            global_batch([make_graph([], start=0, end=W)], "edges", 4)


class TestIntraBatch:
    def test_partitions_stay_in_window(self):
        w = window(2, 10)
        parts = intra_batch(w, "edges", 4, window_index=2)
        assert [len(p.graph.edges) for p in parts] == [4, 4, 2]
        assert parts[0].graph.window_start == w.window_start
        assert parts[-1].graph.window_end == w.window_end
        assert all(p.membership == [2] * len(p.graph.edges) for p in parts)

    def test_minutes(self):
        parts = intra_batch(window(0, 15), "minutes", 5)
        assert [len(p.graph.edges) for p in parts] == [5, 5, 5]

    def test_unknown_mode(self):
        with pytest.raises(BatchingError):
            intra_batch(window(0, 3), "hours", 1)

    def test_bad_size(self):
        with pytest.raises(BatchingError):
            intra_batch(window(0, 3), "edges", 0)


class TestInterBatch:
    def test_groups_and_namespaces(self):
        graphs = [window(i, 2) for i in range(5)]
        batches = inter_batch(graphs, 2)
        assert len(batches) == 3
        merged = batches[0]
        assert set(merged.graph.nodes) == {"0@a", "0@b", "0@c", "1@a", "1@b", "1@c"}
        assert merged.node_origin["1@b"] == (1, "b")
        assert merged.source_key("1@b") == "b"
        assert merged.graph.nodes["1@b"].id == "b"
        assert sorted(set(merged.membership)) == [0, 1]
        assert len(merged.graph.edges) == 4

    def test_single_member_not_namespaced(self):
        batches = inter_batch([window(i, 2) for i in range(3)], 2)
        assert set(batches[-1].graph.nodes) == {"a", "b", "c"}

    def test_bad_batch_size(self):
        with pytest.raises(BatchingError):
            inter_batch([window(0, 2)], 0)


class TestNeighborIndex:
    def test_matches_brute_force(self):
        windows = [window(i, 6, nodes=("a", "b", "c", "d")) for i in range(4)]
        batches = [p for i, w in enumerate(windows) for p in intra_batch(w, "edges", 4, i)]
        snapshots = build_neighbor_index(batches, k=3)
        expected = brute_force_neighbors(batches, 3)
        assert [s.neighbors for s in snapshots] == expected

    def test_no_future_entries(self):
        batches = [p for i in range(3) for p in intra_batch(window(i, 5), "edges", 2, i)]
        for b, snap in zip(batches, build_neighbor_index(batches, k=20)):
            assert all(ts < b.graph.window_start for entries in snap.neighbors.values() for _, ts, _ in entries)

    def test_first_batch_empty(self):
        snap = build_neighbor_index(intra_batch(window(0, 3), "edges", 10), k=5)[0]
        assert all(entries == [] for entries in snap.neighbors.values())

    def test_out_of_order(self):
        batches = intra_batch(window(1, 3), "edges", 10) + intra_batch(window(0, 3), "edges", 10)
        with pytest.raises(BatchingError, match="order"):
            build_neighbor_index(batches, k=5)

    def test_bad_k(self):
        with pytest.raises(BatchingError):
            build_neighbor_index([], k=0)

    def test_buffers_of_departed_nodes_trimmed(self):
        first = window(0, 12, nodes=("x", "y"))
        later = [window(i, 4, nodes=("a", "b")) for i in (1, 2)]
        buffers = LastNeighborBuffers(k=3)
        for g in [first, *later]:
            buffers.advance(g.window_start)
            buffers.snapshot({e.id for e in g.nodes.values()}, g.window_start)
            buffers.record(g)
        assert len(buffers.buffers["x"]) == 3
        assert len(buffers.buffers["y"]) == 3
        assert [ts for _, ts, _ in buffers.buffers["x"]] == [9 * NS_PER_MINUTE, 10 * NS_PER_MINUTE, 11 * NS_PER_MINUTE]

    def test_current_window_entries_kept_until_passed(self):
        buffers = LastNeighborBuffers(k=2)
        g = window(0, 6, nodes=("x", "y"))
        buffers.record(g)
        assert len(buffers.buffers["x"]) == 6
        buffers.advance(W)
        assert len(buffers.buffers["x"]) == 2


class TestApplyBatching:
    def test_no_batching_keeps_windows(self):
        windows = [window(0, 3), make_graph([], start=W, end=2 * W), window(2, 3)]
        batches = apply_batching(windows, {})
        assert [b.membership[0] for b in batches] == [0, 2]

    def test_composition(self):
        windows = [window(i, 6) for i in range(4)]
        section = {
            "global_batching": {"used_method": "none"},
            "intra_graph_batching": {"used_methods": "edges, tgn_last_neighbor", "size": 3},
            "inter_graph_batching": {"used_method": "graph_batching", "batch_size": 2},
        }
        batches = apply_batching(windows, section)
        assert len(batches) == 4
        assert sum(len(b.graph.edges) for b in batches) == 24
        assert all(b.origin is BatchOrigin.INTER for b in batches)

    def test_global_then_intra(self):
        section = {"global_batching": {"used_method": "edges", "size": 8},
                   "intra_graph_batching": {"used_methods": "edges", "size": 3}}
        batches = apply_batching([window(0, 8), window(1, 8)], section)
        assert [len(b.graph.edges) for b in batches] == [3, 3, 2, 3, 3, 2]

    def test_empty(self):
        assert apply_batching([make_graph([], start=0, end=W)], {}) == []

    def test_neighbor_settings(self):
        section = {"intra_graph_batching": {"used_methods": ["edges", "tgn_last_neighbor"],
                                            "tgn_last_neighbor": {"k": 7}}}
        assert wants_neighbor_index(section)
        assert neighbor_k(section) == 7
        assert not wants_neighbor_index({})
        assert neighbor_k({}) == 20


class TestBatchFiles:
    def test_batches_and_neighbors_read_back(self, tmp_path):
        batches = inter_batch([window(i, 2) for i in range(3)], 2)
        path = tmp_path / "batches.jsonl"
        write_batches(path, "train", batches[:1])
        write_batches(path, "test", batches[1:])
        loaded = read_batches(path)
        assert len(loaded["train"]) == 1 and len(loaded["test"]) == 1 and loaded["val"] == []
        assert loaded["train"][0].node_origin == batches[0].node_origin
        assert loaded["train"][0].graph.edges == batches[0].graph.edges

        snaps = build_neighbor_index(batches, k=2)
        npath = tmp_path / "neighbors.jsonl"
        write_neighbors(npath, "train", snaps)
        assert [s.neighbors for s in read_neighbors(npath)["train"]] == [s.neighbors for s in snaps]
