"""Structural graph transformations applied to each window."""

import logging
from collections import defaultdict
from typing import Any

import networkx as nx

from pidsbench.config import method_list
from pidsbench.errors import TransformError
from pidsbench.ingest import Edge, Entity, ProvGraph

logger = logging.getLogger(__name__)

PSEUDO_ROOT_OP = "pseudo_root"
VERSION_SEP = "#"


def _copy(g: ProvGraph, edges: list[Edge], **changes: Any) -> ProvGraph:
    out = ProvGraph(
        window_start=g.window_start,
        window_end=g.window_end,
        nodes=dict(g.nodes),
        edges=edges,
        directed=changes.get("directed", g.directed),
    )
    out.sort_edges()
    return out


def to_undirected(g: ProvGraph) -> ProvGraph:
    """Add a reverse arc for every edge unless an identical reverse exists."""
    present = {e.as_tuple() for e in g.edges}
    edges = list(g.edges)
    for e in g.edges:
        if e.src == e.dst:
            continue
        reverse = (e.dst, e.src, e.op, e.ts)
        if reverse not in present:
            present.add(reverse)
            edges.append(Edge(e.dst, e.src, e.op, e.ts, e.event_id, e.synthetic))
    return _copy(g, edges, directed=False)


def remove_redundant(g: ProvGraph) -> tuple[ProvGraph, int]:
    """Keep only the earliest edge of each (src, dst, op) triple."""
    seen: set[tuple[str, str, str]] = set()
    kept: list[Edge] = []
    for e in sorted(g.edges, key=Edge.sort_key):
        triple = (e.src, e.dst, e.op)
        if triple not in seen:
            seen.add(triple)
            kept.append(e)
    return _copy(g, kept), len(g.edges) - len(kept)


def versioned_key(key: str, version: int) -> str:
    return key if version == 0 else f"{key}{VERSION_SEP}{version}"


def to_dag(g: ProvGraph) -> ProvGraph:
    """Node versioning in timestamp order.

    An edge arriving at a node whose current version already has an outgoing
    edge (or any self-loop) moves the target to a new version.
    """
    version: dict[str, int] = defaultdict(int)
    has_out: dict[str, bool] = defaultdict(bool)
    nodes: dict[str, Entity] = dict(g.nodes)
    edges: list[Edge] = []

    for e in sorted(g.edges, key=Edge.sort_key):
        src_key = versioned_key(e.src, version[e.src])
        if e.src == e.dst or has_out[e.dst]:
            version[e.dst] += 1
            has_out[e.dst] = False
            base = g.nodes[e.dst]
            nodes[versioned_key(e.dst, version[e.dst])] = Entity(base.id, base.kind, dict(base.attrs))
        dst_key = versioned_key(e.dst, version[e.dst])
        if e.src != e.dst:
            has_out[e.src] = True
        edges.append(Edge(src_key, dst_key, e.op, e.ts, e.event_id, e.synthetic))

    out = _copy(g, edges)
    out.nodes = nodes
    return out


def as_digraph(g: ProvGraph) -> nx.DiGraph:
    """The window's node keys and arcs as a networkx DiGraph."""
    dg = nx.DiGraph()
    dg.add_nodes_from(g.nodes)
    dg.add_edges_from((e.src, e.dst) for e in g.edges)
    return dg


def topological_order(g: ProvGraph) -> list[str] | None:
    """Lexicographic topological order of node keys; None when the graph has a cycle."""
    dg = as_digraph(g)
    if not nx.is_directed_acyclic_graph(dg):
        return None
    return list(nx.lexicographical_topological_sort(dg))


def pseudo_root_edges(g: ProvGraph) -> ProvGraph:
    """Connect every node to each in-degree-zero ancestor with a synthetic edge."""
    dg = as_digraph(g)
    if not nx.is_directed_acyclic_graph(dg):
        raise TransformError(
            f"pseudo_root needs an acyclic graph (window {g.window_start}); apply dag first"
        )
    roots = {key for key, deg in dg.in_degree() if deg == 0}

    edges = list(g.edges)
    added = 0
    for key in sorted(dg.nodes):
        if key in roots:
            continue
        for root in sorted(nx.ancestors(dg, key) & roots):
            edges.append(Edge(root, key, PSEUDO_ROOT_OP, g.window_start, -1, synthetic=True))
            added += 1
    logger.debug("Added %d pseudo-root edges to window %d", added, g.window_start)
    return _copy(g, edges)


def apply_transforms(g: ProvGraph, methods: Any) -> ProvGraph:
    """Apply the configured transforms in list order."""
    for method in method_list(methods):
        if method == "undirected":
            g = to_undirected(g)
        elif method == "remove_redundant":
            g, removed = remove_redundant(g)
            logger.debug("Removed %d redundant edges from window %d", removed, g.window_start)
        elif method == "dag":
            g = to_dag(g)
        elif method == "pseudo_root":
            g = pseudo_root_edges(g)
        else:
            raise TransformError(f"unknown transformation {method!r}")
    return g
