"""Provenance event parsing, time-windowed graph construction and dataset splits.

Event files hold one JSON record per line::

    {"id": 7, "ts": 1700000000000000000, "op": "read",
     "src": {"id": "<32 hex>", "kind": "subject", "path": "/bin/cat", "cmd_line": "cat a"},
     "dst": {"id": "<32 hex>", "kind": "file", "path": "/etc/passwd"}}

Label files hold ``<node-hex-id>,<attack_id>`` lines.
"""

import heapq
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator

import yaml

from pidsbench.errors import ConfigError, IngestError, SplitLeakageError

logger = logging.getLogger(__name__)

NS_PER_SECOND = 1_000_000_000
NS_PER_MINUTE = 60 * NS_PER_SECOND


class EntityKind(str, Enum):
    SUBJECT = "subject"
    FILE = "file"
    NETFLOW = "netflow"


class Op(str, Enum):
    READ = "read"
    WRITE = "write"
    EXECUTE = "execute"
    FORK = "fork"
    OPEN = "open"
    CLOSE = "close"
    UNLINK = "unlink"
    CONNECT = "connect"
    SEND = "send"
    RECV = "recv"
    MMAP = "mmap"
    CLONE = "clone"


KINDS = tuple(k.value for k in EntityKind)
OPS = tuple(o.value for o in Op)
SELF_LOOP_OPS = frozenset({Op.MMAP.value, Op.CLONE.value})

KIND_ATTRS: dict[str, tuple[str, ...]] = {
    "subject": ("path", "cmd_line"),
    "file": ("path",),
    "netflow": ("remote_ip", "remote_port"),
}

DATASET_IDS = (
    "CADETS_E3",
    "THEIA_E3",
    "CLEARSCOPE_E3",
    "FIVEDIRECTIONS_E3",
    "TRACE_E3",
    "CADETS_E5",
    "THEIA_E5",
    "CLEARSCOPE_E5",
    "FIVEDIRECTIONS_E5",
    "TRACE_E5",
    "optc_h201",
    "optc_h501",
    "optc_h051",
)

_HEX_ID = re.compile(r"^[0-9a-f]{32}$")


@dataclass
class Entity:
    id: str
    kind: str
    attrs: dict[str, str] = field(default_factory=dict)


@dataclass
class ProvEvent:
    event_id: int
    ts: int
    op: str
    src: Entity
    dst: Entity


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    op: str
    ts: int
    event_id: int
    synthetic: bool = False

    def sort_key(self) -> tuple[int, int]:
        return (self.ts, self.event_id)

    def as_tuple(self) -> tuple[str, str, str, int]:
        return (self.src, self.dst, self.op, self.ts)


@dataclass
class ProvGraph:
    """One time window. ``nodes`` maps graph keys to entities; keys equal
    ``Entity.id`` except after DAG versioning or inter-graph merging."""

    window_start: int
    window_end: int
    nodes: dict[str, Entity] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)
    directed: bool = True

    def sort_edges(self) -> None:
        self.edges.sort(key=Edge.sort_key)

    def base_id(self, key: str) -> str:
        return self.nodes[key].id


@dataclass
class GroundTruth:
    malicious: dict[str, int]
    dataset_id: str = ""

    @property
    def attack_ids(self) -> list[int]:
        return sorted(set(self.malicious.values()))


@dataclass
class DatasetSplit:
    train: list[ProvGraph]
    val: list[ProvGraph]
    test: list[ProvGraph]
    boundaries: tuple[int, int]


@dataclass
class ParseSummary:
    parsed: int = 0
    skipped: int = 0


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _parse_entity(obj: Any) -> Entity:
    if not isinstance(obj, dict):
        raise ValueError("entity must be an object")
    entity_id = str(obj["id"]).lower()
    if not _HEX_ID.match(entity_id):
        raise ValueError(f"bad entity id {obj['id']!r}")
    kind = obj["kind"]
    if kind not in KIND_ATTRS:
        raise ValueError(f"unknown kind {kind!r}")
    attrs = {"type": str(obj.get("type") or kind)}
    for name in KIND_ATTRS[kind]:
        value = obj.get(name)
        if value is not None:
            attrs[name] = str(value)
    return Entity(id=entity_id, kind=kind, attrs=attrs)


def parse_record(line: str) -> ProvEvent:
    """Parse one event line. Raises ValueError/KeyError/TypeError when malformed."""
    rec = json.loads(line)
    if not isinstance(rec, dict):
        raise ValueError("record must be an object")
    event_id, ts, op = rec["id"], rec["ts"], rec["op"]
    if isinstance(event_id, bool) or not isinstance(event_id, int) or event_id < 0:
        raise ValueError(f"bad event id {event_id!r}")
    if isinstance(ts, bool) or not isinstance(ts, int) or ts <= 0:
        raise ValueError(f"bad timestamp {ts!r}")
    if op not in OPS:
        raise ValueError(f"unknown op {op!r}")
    src, dst = _parse_entity(rec["src"]), _parse_entity(rec["dst"])
    if src.id == dst.id and op not in SELF_LOOP_OPS:
        raise ValueError(f"self-loop not allowed for {op}")
    return ProvEvent(event_id=event_id, ts=ts, op=op, src=src, dst=dst)


def parse_events(
    stream: Iterable[str],
    max_malformed_ratio: float = 0.01,
    summary: ParseSummary | None = None,
) -> Iterator[ProvEvent]:
    """Yield events in file order, skipping malformed lines.

    Once the stream is exhausted, a malformed share above max_malformed_ratio
    raises IngestError: the file is most likely in the wrong format.
    """
    summary = summary if summary is not None else ParseSummary()
    try:
        for lineno, line in enumerate(stream, start=1):
            if not line.strip():
                continue
            try:
                event = parse_record(line)
            except (ValueError, KeyError, TypeError) as e:
                summary.skipped += 1
                logger.debug("Skipping malformed line %d: %s", lineno, e)
                continue
            summary.parsed += 1
            yield event
    except OSError as e:
        raise IngestError(f"unreadable event stream: {e}") from e

    total = summary.parsed + summary.skipped
    logger.info("Parsed %d events, skipped %d malformed lines", summary.parsed, summary.skipped)
    if summary.skipped:
        logger.warning("Skipped %d malformed event lines", summary.skipped)
    if total and summary.skipped / total > max_malformed_ratio:
        raise IngestError(
            f"{summary.skipped} of {total} lines malformed "
            f"(limit {max_malformed_ratio:.2%}); is this the normalized event format?"
        )


def read_events(path: str | Path, max_malformed_ratio: float = 0.01,
                summary: ParseSummary | None = None) -> Iterator[ProvEvent]:
    try:
        f = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise IngestError(f"cannot open event file {path}: {e}") from e
    with f:
        yield from parse_events(f, max_malformed_ratio, summary)


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


def _reordered(events: Iterable[ProvEvent], slack_ns: int) -> Iterator[ProvEvent]:
    heap: list[tuple[int, int, int, ProvEvent]] = []
    newest = None
    for seq, ev in enumerate(events):
        if newest is not None and ev.ts < newest - slack_ns:
            raise IngestError(
                f"event {ev.event_id} at {ev.ts} is {(newest - ev.ts) / NS_PER_SECOND:.1f}s "
                f"out of order (slack {slack_ns / NS_PER_SECOND:.0f}s)"
            )
        heapq.heappush(heap, (ev.ts, ev.event_id, seq, ev))
        newest = ev.ts if newest is None else max(newest, ev.ts)
        while heap and heap[0][0] <= newest - slack_ns:
            yield heapq.heappop(heap)[3]
    while heap:
        yield heapq.heappop(heap)[3]


def _merge_node(nodes: dict[str, Entity], entity: Entity) -> None:
    existing = nodes.get(entity.id)
    if existing is None:
        nodes[entity.id] = Entity(entity.id, entity.kind, dict(entity.attrs))
    else:
        existing.attrs.update(entity.attrs)


def build_windows(
    events: Iterable[ProvEvent],
    window_minutes: int = 15,
    reorder_slack_seconds: int = 60,
) -> list[ProvGraph]:
    """Group events into fixed windows aligned to the first event's minute.

    Only windows that contain events are returned.
    """
    if window_minutes < 1:
        raise IngestError(f"window_minutes must be >= 1, got {window_minutes}")
    width = window_minutes * NS_PER_MINUTE
    kinds: dict[str, str] = {}
    windows: dict[int, ProvGraph] = {}
    origin = None

    for ev in _reordered(events, reorder_slack_seconds * NS_PER_SECOND):
        if origin is None:
            origin = ev.ts - ev.ts % NS_PER_MINUTE
        for entity in (ev.src, ev.dst):
            known = kinds.setdefault(entity.id, entity.kind)
            if known != entity.kind:
                raise IngestError(f"entity {entity.id} seen as both {known} and {entity.kind}")
        index = (ev.ts - origin) // width
        graph = windows.get(index)
        if graph is None:
            start = origin + index * width
            graph = windows[index] = ProvGraph(window_start=start, window_end=start + width)
        _merge_node(graph.nodes, ev.src)
        _merge_node(graph.nodes, ev.dst)
        graph.edges.append(Edge(ev.src.id, ev.dst.id, ev.op, ev.ts, ev.event_id))

    if origin is None:
        raise IngestError("empty event stream")

    out = [windows[i] for i in sorted(windows)]
    for graph in out:
        graph.sort_edges()
    logger.info("Built %d windows of %d minutes", len(out), window_minutes)
    return out


# ---------------------------------------------------------------------------
# Labels and splits
# ---------------------------------------------------------------------------


def load_ground_truth(path: str | Path, dataset_id: str = "") -> GroundTruth:
    malicious: dict[str, int] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IngestError(f"cannot read label file {path}: {e}") from e

    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        node, _, attack = line.partition(",")
        node = node.strip().lower()
        if not _HEX_ID.match(node):
            raise IngestError(f"{path}:{lineno}: bad node id {node!r}")
        try:
            attack_id = int(attack.strip())
        except ValueError:
            raise IngestError(f"{path}:{lineno}: bad attack id {attack.strip()!r}") from None
        previous = malicious.setdefault(node, attack_id)
        if previous != attack_id:
            raise IngestError(
                f"{path}:{lineno}: node {node} labeled with attacks {previous} and {attack_id}"
            )
    return GroundTruth(malicious=malicious, dataset_id=dataset_id)


def split_dataset(
    windows: list[ProvGraph],
    gt: GroundTruth,
    train_end: int,
    val_end: int,
) -> DatasetSplit:
    """Partition windows by window_start into train < train_end <= val < val_end <= test."""
    if not windows:
        raise IngestError("no windows to split")
    if not train_end < val_end:
        raise IngestError(f"train_end ({train_end}) must be before val_end ({val_end})")
    span_start, span_end = windows[0].window_start, windows[-1].window_end
    if not (span_start < train_end <= span_end and span_start < val_end <= span_end):
        raise IngestError(f"split boundaries outside dataset span [{span_start}, {span_end})")

    split = DatasetSplit(train=[], val=[], test=[], boundaries=(train_end, val_end))
    for w in windows:
        if w.window_start < train_end:
            split.train.append(w)
        elif w.window_start < val_end:
            split.val.append(w)
        else:
            split.test.append(w)

    for name in ("train", "val"):
        part = getattr(split, name)
        if not part:
            raise IngestError(f"empty {name} span")
        for w in part:
            leaked = sorted({e.id for e in w.nodes.values() if e.id in gt.malicious})
            if leaked:
                raise SplitLeakageError(name, w.window_start, leaked)

    logger.info(
        "Split %d windows into train=%d val=%d test=%d",
        len(windows), len(split.train), len(split.val), len(split.test),
    )
    return split


# ---------------------------------------------------------------------------
# Graph files
# ---------------------------------------------------------------------------


def graph_to_record(g: ProvGraph) -> dict[str, Any]:
    return {
        "window_start": g.window_start,
        "window_end": g.window_end,
        "directed": g.directed,
        "nodes": [
            {"key": key, "id": e.id, "kind": e.kind, "attrs": e.attrs}
            for key, e in sorted(g.nodes.items())
        ],
        "edges": [[e.src, e.dst, e.op, e.ts, e.event_id, e.synthetic] for e in g.edges],
    }


def graph_from_record(rec: dict[str, Any]) -> ProvGraph:
    return ProvGraph(
        window_start=rec["window_start"],
        window_end=rec["window_end"],
        directed=rec["directed"],
        nodes={n["key"]: Entity(n["id"], n["kind"], dict(n["attrs"])) for n in rec["nodes"]},
        edges=[Edge(s, d, op, ts, eid, bool(syn)) for s, d, op, ts, eid, syn in rec["edges"]],
    )


def write_graphs(path: str | Path, graphs: Iterable[ProvGraph], split: str | None = None) -> None:
    with open(path, "a" if split else "w", encoding="utf-8") as f:
        for g in graphs:
            rec = graph_to_record(g)
            if split:
                rec["split"] = split
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_graphs(path: str | Path) -> dict[str, list[ProvGraph]]:
    """Read a graphs file written per split; returns split name → windows."""
    out: dict[str, list[ProvGraph]] = {"train": [], "val": [], "test": []}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out.setdefault(rec.get("split", "test"), []).append(graph_from_record(rec))
    return out


def write_split(path: str | Path, split: DatasetSplit) -> None:
    """Write all three splits of a DatasetSplit to one graphs file."""
    Path(path).write_text("")
    for name in ("train", "val", "test"):
        write_graphs(path, getattr(split, name), split=name)


def write_labels(path: str | Path, gt: GroundTruth) -> None:
    lines = [f"{node},{attack}" for node, attack in sorted(gt.malicious.items())]
    Path(path).write_text("".join(line + "\n" for line in lines))


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetManifest:
    dataset_id: str
    directory: Path
    train_end: int
    val_end: int

    @property
    def events_path(self) -> Path:
        return self.directory / "events.jsonl"

    @property
    def labels_path(self) -> Path:
        return self.directory / "labels.csv"


def load_manifest(directory: str | Path) -> DatasetManifest:
    directory = Path(directory)
    path = directory / "dataset.yml"
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as e:
        raise IngestError(f"cannot read dataset manifest {path}: {e}") from e
    except yaml.YAMLError as e:
        raise IngestError(f"bad dataset manifest {path}: {e}") from e
    try:
        return DatasetManifest(
            dataset_id=str(doc.get("dataset_id", directory.name)),
            directory=directory,
            train_end=int(doc["train_end"]),
            val_end=int(doc["val_end"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise IngestError(f"dataset manifest {path} needs integer train_end and val_end") from e


def find_dataset(name: str, data_dir: str | Path) -> DatasetManifest:
    """Locate a dataset directory under data_dir.

    Recognized identifiers and any directory that carries a ``dataset.yml``
    are accepted; anything else is a configuration error.
    """
    directory = Path(data_dir) / name
    if (directory / "dataset.yml").is_file():
        return load_manifest(directory)
    if name in DATASET_IDS:
        raise ConfigError(
            f"dataset {name} has no data under {directory} (expected dataset.yml, events.jsonl, labels.csv)"
        )
    raise ConfigError(f"unknown dataset {name!r}; recognized: {', '.join(DATASET_IDS)}")
