"""Repartition windows into training batches.

Three strategies compose in a fixed order: global (flatten every window and
cut fixed chunks), intra-graph (cut within each graph) and inter-graph
(merge consecutive graphs). Last-neighbor snapshots for the tgn encoder are
computed in one sequential pass over the final batch list.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

from pidsbench.config import method_list
from pidsbench.errors import BatchingError
from pidsbench.ingest import NS_PER_MINUTE, Edge, Entity, ProvGraph, graph_from_record, graph_to_record

logger = logging.getLogger(__name__)

NAMESPACE_SEP = "@"
MODES = ("edges", "minutes")

Entry = tuple[str, int, str]


class BatchOrigin(str, Enum):
    GLOBAL = "global"
    INTRA = "intra"
    INTER = "inter"


@dataclass
class Batch:
    graph: ProvGraph
    membership: list[int]
    origin: BatchOrigin
    node_origin: dict[str, tuple[int, str]] = field(default_factory=dict)

    def source_key(self, key: str) -> str:
        """Graph key before inter-graph namespacing."""
        return self.node_origin[key][1] if key in self.node_origin else key


@dataclass
class NeighborIndex:
    """Most recent earlier interactions per node (base entity id), newest first."""

    window_start: int
    k: int
    neighbors: dict[str, list[tuple[str, int, str]]] = field(default_factory=dict)


_Tagged = tuple[Edge, int, Entity, Entity]


def _tag(graph: ProvGraph, membership: list[int]) -> list[_Tagged]:
    return [(e, m, graph.nodes[e.src], graph.nodes[e.dst]) for e, m in zip(graph.edges, membership)]


def _assemble(tagged: list[_Tagged], start: int, end: int, origin: BatchOrigin, directed: bool) -> Batch:
    nodes: dict[str, Entity] = {}
    for e, _, src, dst in tagged:
        nodes.setdefault(e.src, src)
        nodes.setdefault(e.dst, dst)
    graph = ProvGraph(start, end, nodes, [t[0] for t in tagged], directed)
    return Batch(graph=graph, membership=[t[1] for t in tagged], origin=origin)


def _cut(tagged: list[_Tagged], mode: str, size: int, start: int, end: int,
         origin: BatchOrigin, directed: bool) -> list[Batch]:
    """Cut ts-ordered edges into chunks of size edges or size-minute spans from start."""
    if mode not in MODES:
        raise BatchingError(f"unknown batching mode {mode!r}")
    if size < 1:
        raise BatchingError(f"batch size must be >= 1, got {size}")

    out: list[Batch] = []
    if mode == "edges":
        for i in range(0, len(tagged), size):
            chunk = tagged[i:i + size]
            lo = start if i == 0 else chunk[0][0].ts
            hi = end if i + size >= len(tagged) else chunk[-1][0].ts + 1
            out.append(_assemble(chunk, lo, hi, origin, directed))
        return out

    width = size * NS_PER_MINUTE
    groups: dict[int, list[_Tagged]] = {}
    for t in tagged:
        groups.setdefault((t[0].ts - start) // width, []).append(t)
    for index in sorted(groups):
        lo = start + index * width
        out.append(_assemble(groups[index], lo, min(lo + width, end), origin, directed))
    return out


def _ordered(tagged: Iterable[_Tagged]) -> list[_Tagged]:
    return sorted(tagged, key=lambda t: (t[0].ts, t[0].event_id))


def global_batch(windows: list[ProvGraph], mode: str, size: int) -> list[Batch]:
    """Flatten all windows in ts order and cut the stream into chunks."""
    tagged = _ordered(t for i, w in enumerate(windows) for t in _tag(w, [i] * len(w.edges)))
    if not tagged:
        raise BatchingError("global batching needs at least one edge")
    start = min(w.window_start for w in windows)
    if mode == "minutes":
        start = tagged[0][0].ts - tagged[0][0].ts % NS_PER_MINUTE
    end = max(w.window_end for w in windows)
    return _cut(tagged, mode, size, start, end, BatchOrigin.GLOBAL, all(w.directed for w in windows))


def _intra(batch: Batch, mode: str, size: int) -> list[Batch]:
    g = batch.graph
    if not g.edges:
        raise BatchingError(f"cannot batch empty graph at {g.window_start}")
    parts = _cut(_ordered(_tag(g, batch.membership)), mode, size, g.window_start, g.window_end,
                 BatchOrigin.INTRA, g.directed)
    for part in parts:
        part.node_origin = {k: v for k, v in batch.node_origin.items() if k in part.graph.nodes}
    return parts


def intra_batch(w: ProvGraph, mode: str, size: int, window_index: int = 0) -> list[Batch]:
    """Chunk one window; partitions never cross its boundaries."""
    return _intra(Batch(w, [window_index] * len(w.edges), BatchOrigin.INTRA), mode, size)


def _inter(batches: list[Batch], batch_size: int) -> list[Batch]:
    if batch_size < 1:
        raise BatchingError(f"inter-graph batch_size must be >= 1, got {batch_size}")
    out: list[Batch] = []
    for lo in range(0, len(batches), batch_size):
        group = list(enumerate(batches[lo:lo + batch_size], start=lo))
        if len(group) == 1:
            b = group[0][1]
            out.append(Batch(b.graph, list(b.membership), BatchOrigin.INTER, dict(b.node_origin)))
            continue
        nodes: dict[str, Entity] = {}
        node_origin: dict[str, tuple[int, str]] = {}
        tagged: list[tuple[Edge, int]] = []
        for index, b in group:
            def ns(key: str, index: int = index) -> str:
                return f"{index}{NAMESPACE_SEP}{key}"
            for key, entity in b.graph.nodes.items():
                nodes[ns(key)] = entity
                node_origin[ns(key)] = (index, b.source_key(key))
            for e, m in zip(b.graph.edges, b.membership):
                tagged.append((Edge(ns(e.src), ns(e.dst), e.op, e.ts, e.event_id, e.synthetic), m))
        tagged.sort(key=lambda t: (t[0].ts, t[0].event_id))
        graph = ProvGraph(
            window_start=min(b.graph.window_start for _, b in group),
            window_end=max(b.graph.window_end for _, b in group),
            nodes=nodes,
            edges=[t[0] for t in tagged],
            directed=all(b.graph.directed for _, b in group),
        )
        out.append(Batch(graph, [t[1] for t in tagged], BatchOrigin.INTER, node_origin))
    return out


def inter_batch(graphs: list[ProvGraph], batch_size: int) -> list[Batch]:
    """Merge consecutive groups of graphs; keys become ``<index>@<key>``."""
    wrapped = [Batch(g, [i] * len(g.edges), BatchOrigin.INTER) for i, g in enumerate(graphs)]
    return _inter(wrapped, batch_size)


class LastNeighborBuffers:
    """Per-node interaction buffers holding at most k entries older than the stream position.

    Entries at or after the current batch start stay until the stream moves
    past them; nodes holding such entries are tracked so they are trimmed
    even if they never appear again.
    """

    def __init__(self, k: int) -> None:
        if k < 1:
            raise BatchingError(f"neighbor buffer size must be >= 1, got {k}")
        self.k = k
        self.buffers: dict[str, list[Entry]] = {}
        self._open: set[str] = set()

    def _trim(self, node_id: str, start: int) -> list[Entry]:
        entries = self.buffers.get(node_id, [])
        earlier = [x for x in entries if x[1] < start][-self.k:]
        pending = [x for x in entries if x[1] >= start]
        self.buffers[node_id] = earlier + pending
        if pending:
            self._open.add(node_id)
        else:
            self._open.discard(node_id)
        return earlier

    def advance(self, start: int) -> None:
        for node_id in list(self._open):
            self._trim(node_id, start)

    def snapshot(self, node_ids: Iterable[str], start: int) -> dict[str, list[Entry]]:
        """Newest-first k latest entries strictly before start, per node."""
        return {node_id: self._trim(node_id, start)[::-1] for node_id in sorted(node_ids)}

    def record(self, g: ProvGraph) -> None:
        touched: set[str] = set()
        for e in g.edges:
            src, dst = g.nodes[e.src].id, g.nodes[e.dst].id
            self.buffers.setdefault(src, []).append((dst, e.ts, e.op))
            touched.add(src)
            if src != dst:
                self.buffers.setdefault(dst, []).append((src, e.ts, e.op))
                touched.add(dst)
        for node_id in touched:
            self._trim(node_id, g.window_start)


def build_neighbor_index(batches: list[Batch], k: int) -> list[NeighborIndex]:
    """Snapshot each node's k latest earlier interactions before inserting a batch."""
    buffers = LastNeighborBuffers(k)
    out: list[NeighborIndex] = []
    previous_start = None
    for b in batches:
        g = b.graph
        if previous_start is not None and g.window_start < previous_start:
            raise BatchingError(
                f"batches out of temporal order: {g.window_start} after {previous_start}"
            )
        previous_start = g.window_start

        buffers.advance(g.window_start)
        snapshot = NeighborIndex(window_start=g.window_start, k=k)
        snapshot.neighbors = buffers.snapshot({e.id for e in g.nodes.values()}, g.window_start)
        out.append(snapshot)
        buffers.record(g)
    return out


def _mode_of(methods: list[str]) -> str | None:
    modes = [m for m in methods if m in MODES]
    return modes[0] if modes else None


def apply_batching(windows: list[ProvGraph], batching: dict[str, Any]) -> list[Batch]:
    """Compose global, intra-graph and inter-graph batching as configured."""
    glob = batching.get("global_batching") or {}
    intra = batching.get("intra_graph_batching") or {}
    inter = batching.get("inter_graph_batching") or {}

    populated = [(i, w) for i, w in enumerate(windows) if w.edges]
    if not populated:
        return []

    global_mode = _mode_of(method_list(glob.get("used_method")))
    if global_mode:
        batches = global_batch(windows, global_mode, int(glob.get("size", 1)))
    else:
        batches = [Batch(w, [i] * len(w.edges), BatchOrigin.INTRA) for i, w in populated]

    intra_mode = _mode_of(method_list(intra.get("used_methods")))
    if intra_mode:
        batches = [part for b in batches for part in _intra(b, intra_mode, int(intra.get("size", 1)))]

    if "graph_batching" in method_list(inter.get("used_method")):
        batches = _inter(batches, int(inter.get("batch_size", 1)))

    logger.debug("Batched %d windows into %d batches", len(windows), len(batches))
    return batches


def wants_neighbor_index(batching: dict[str, Any]) -> bool:
    intra = batching.get("intra_graph_batching") or {}
    return "tgn_last_neighbor" in method_list(intra.get("used_methods"))


def neighbor_k(batching: dict[str, Any], default: int = 20) -> int:
    intra = batching.get("intra_graph_batching") or {}
    return int((intra.get("tgn_last_neighbor") or {}).get("k", default))


# ---------------------------------------------------------------------------
# Batch files
# ---------------------------------------------------------------------------


def _dump(f: Any, rec: dict[str, Any]) -> None:
    f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def write_batches(path: str | Path, split: str, batches: list[Batch]) -> None:
    with open(path, "a", encoding="utf-8") as f:
        for i, b in enumerate(batches):
            _dump(f, {
                "split": split,
                "index": i,
                "origin": b.origin.value,
                "membership": b.membership,
                "node_origin": {k: list(v) for k, v in sorted(b.node_origin.items())},
                "graph": graph_to_record(b.graph),
            })


def read_batches(path: str | Path) -> dict[str, list[Batch]]:
    out: dict[str, list[Batch]] = {"train": [], "val": [], "test": []}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.setdefault(rec["split"], []).append(Batch(
                graph=graph_from_record(rec["graph"]),
                membership=list(rec["membership"]),
                origin=BatchOrigin(rec["origin"]),
                node_origin={k: (v[0], v[1]) for k, v in rec["node_origin"].items()},
            ))
    return out


def write_neighbors(path: str | Path, split: str, snapshots: list[NeighborIndex]) -> None:
    with open(path, "a", encoding="utf-8") as f:
        for i, n in enumerate(snapshots):
            _dump(f, {
                "split": split,
                "index": i,
                "window_start": n.window_start,
                "k": n.k,
                "nodes": {node: [list(x) for x in lst] for node, lst in sorted(n.neighbors.items())},
            })


def read_neighbors(path: str | Path) -> dict[str, list[NeighborIndex]]:
    out: dict[str, list[NeighborIndex]] = {"train": [], "val": [], "test": []}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.setdefault(rec["split"], []).append(NeighborIndex(
                window_start=rec["window_start"],
                k=rec["k"],
                neighbors={node: [(x[0], x[1], x[2]) for x in lst] for node, lst in rec["nodes"].items()},
            ))
    return out
