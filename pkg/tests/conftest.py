"""Shared builders for entities, events, graphs and generated datasets."""

import hashlib
import json
from pathlib import Path

import pytest

from pidsbench.ingest import NS_PER_MINUTE, Edge, Entity, ProvGraph
from pidsbench.synthetic import generate_synthetic

REPO_CONFIG_DIR = Path(__file__).resolve().parents[1] / "config"
T0 = 1_600_000_000 * 1_000_000_000 - (1_600_000_000 * 1_000_000_000) % NS_PER_MINUTE


def hexid(name: str) -> str:
    return hashlib.md5(name.encode()).hexdigest()


def entity(name: str, kind: str = "subject", **attrs: str) -> Entity:
    return Entity(hexid(name), kind, {"type": kind, **attrs})


def entity_record(name: str, kind: str = "subject", **attrs: str) -> dict:
    return {"id": hexid(name), "kind": kind, **attrs}


def event_line(event_id: int, ts: int, op: str, src: dict, dst: dict) -> str:
    return json.dumps({"id": event_id, "ts": ts, "op": op, "src": src, "dst": dst})


def make_graph(edges: list[tuple[str, str, str, int]], start: int = 0, end: int | None = None,
               kinds: dict[str, str] | None = None) -> ProvGraph:
    """Graph keyed by node name; entity ids are the names themselves."""
    kinds = kinds or {}
    nodes: dict[str, Entity] = {}
    out: list[Edge] = []
    for i, (src, dst, op, ts) in enumerate(edges, start=1):
        for name in (src, dst):
            kind = kinds.get(name, "subject")
            nodes.setdefault(name, Entity(name, kind, {"type": kind}))
        out.append(Edge(src, dst, op, ts, i))
    if end is None:
        end = max((e[3] for e in edges), default=start) + 1
    return ProvGraph(start, end, nodes, out)


@pytest.fixture
def config_dir():
    return REPO_CONFIG_DIR


@pytest.fixture
def synthetic_data_dir(tmp_path):
    """A small generated dataset under <tmp>/data/SYNTH."""
    data_dir = tmp_path / "data"
    generate_synthetic(seed=7, n_benign_events=1500, n_attack_chains=2, span_hours=3,
                       out_dir=data_dir / "SYNTH", dataset_id="SYNTH")
    return data_dir
