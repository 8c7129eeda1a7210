"""Content-addressed stage cache.

Each of the seven pipeline stages writes its outputs to
``<root>/<stage_name>/<digest>/`` where the digest chains the stage's
canonicalized arguments with its predecessor's digest. A directory only
counts as a Hit once its ``_COMPLETE`` marker has been written by
``commit_stage``.
"""

import errno
import hashlib
import json
import logging
import os
import re
import shutil
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any

from pidsbench.config import ConfigTree
from pidsbench.errors import CacheError
from pidsbench.retry import WaitPolicy, wait_until

logger = logging.getLogger(__name__)

STAGES = (
    "construction",
    "transformation",
    "featurization",
    "batching",
    "training",
    "evaluation",
    "triage",
)

STAGE_ALIASES = {
    "build_graphs": "construction",
    "transformation": "transformation",
    "feat_training": "featurization",
    "embed_nodes": "featurization",
    "batching": "batching",
    "gnn_training": "training",
    "gnn_testing": "evaluation",
    "tracing": "triage",
    **{s: s for s in STAGES},
}

ROOT_SENTINEL = "root"
MARKER_NAME = "_COMPLETE"
SNAPSHOT_NAME = "config_snapshot"
WRITER_NAME = ".writer"

# Keys that cannot change a stage's outputs and are left out of its digest.
EXCLUDED_KEYS = frozenset({
    "num_workers",
    "workers",
    "log_level",
    "verbose",
    "verbosity",
    "show_epoch_loss",
})

_HEX64 = re.compile(r"^[0-9a-f]{64}$")

# Waiting on another process that renamed its outputs but has not yet written the marker.
_COMMIT_WAIT = WaitPolicy(base_seconds=0.02, max_wait_seconds=10.0)


class DecisionKind(str, Enum):
    HIT = "Hit"
    MISS = "Miss"


@dataclass(frozen=True)
class StageKey:
    stage_name: str
    args_digest: str
    parent_digest: str
    digest: str


@dataclass(frozen=True)
class CacheDecision:
    kind: DecisionKind
    artifact_dir: Path
    corrupted_marker: bool = False

    @property
    def is_hit(self) -> bool:
        return self.kind is DecisionKind.HIT


def normalize_stage(name: str) -> str:
    """Map a stage name or one of its aliases (``gnn_training``...) to a stage."""
    try:
        return STAGE_ALIASES[name]
    except KeyError:
        raise CacheError(
            f"invalid stage name {name!r}; expected one of {', '.join(sorted(STAGE_ALIASES))}"
        ) from None


def _strip(node: Any) -> Any:
    if isinstance(node, dict):
        return {str(k): _strip(v) for k, v in node.items() if k not in EXCLUDED_KEYS}
    if isinstance(node, (list, tuple)):
        return [_strip(v) for v in node]
    return node


def canonicalize_args(stage_cfg: dict[str, Any] | ConfigTree) -> bytes:
    """Deterministic bytes for a stage's arguments: sorted keys, shortest float form."""
    root = stage_cfg.root if isinstance(stage_cfg, ConfigTree) else stage_cfg
    return json.dumps(
        _strip(root), sort_keys=True, separators=(",", ":"), ensure_ascii=True
    ).encode("ascii")


def stage_hash(stage_name: str, args: bytes, parent: str) -> str:
    """SHA-256 over stage name, canonical args and the parent digest."""
    if parent != ROOT_SENTINEL and not _HEX64.match(parent):
        raise CacheError(f"invalid parent digest {parent!r}")
    h = hashlib.sha256()
    h.update(stage_name.encode("ascii"))
    h.update(b"\x00")
    h.update(args)
    h.update(b"\x00")
    h.update(parent.encode("ascii"))
    return h.hexdigest()


def make_key(stage_name: str, args: bytes, parent: str) -> StageKey:
    return StageKey(
        stage_name=stage_name,
        args_digest=hashlib.sha256(args).hexdigest(),
        parent_digest=parent,
        digest=stage_hash(stage_name, args, parent),
    )


def stage_args(cfg: ConfigTree, stage_name: str, dataset: str) -> dict[str, Any]:
    """The argument map hashed for a stage; construction also depends on the dataset."""
    args = cfg.section(stage_name)
    if stage_name == "construction":
        args["_dataset"] = dataset
    return args


# ---------------------------------------------------------------------------
# Markers and snapshots
# ---------------------------------------------------------------------------


def read_marker(artifact_dir: Path) -> tuple[str, int] | None:
    """Return (digest, completed_ns) from the marker, None if absent.

    Raises ValueError when the marker exists but cannot be parsed.
    """
    marker = artifact_dir / MARKER_NAME
    if not marker.is_file():
        return None
    lines = marker.read_text(encoding="ascii", errors="replace").split()
    if len(lines) != 2 or not _HEX64.match(lines[0]) or not lines[1].isdigit():
        raise ValueError(f"corrupted marker at {marker}")
    return lines[0], int(lines[1])


def _marker_valid(artifact_dir: Path, digest: str) -> bool:
    try:
        parsed = read_marker(artifact_dir)
    except ValueError:
        return False
    return parsed is not None and parsed[0] == digest


def write_snapshot(directory: Path, key: StageKey, args: dict[str, Any]) -> None:
    payload = {"stage": key.stage_name, "parent_digest": key.parent_digest, "args": args}
    (directory / SNAPSHOT_NAME).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_snapshot(directory: Path) -> dict[str, Any]:
    return json.loads((directory / SNAPSHOT_NAME).read_text())


# ---------------------------------------------------------------------------
# Resolution and commit
# ---------------------------------------------------------------------------


def resolve_stage(key: StageKey, root: Path, force: bool) -> CacheDecision:
    """Hit when the digest directory holds a valid marker and force is false."""
    artifact_dir = Path(root) / key.stage_name / key.digest
    corrupted = False
    try:
        marker = read_marker(artifact_dir)
    except ValueError:
        marker = None
        corrupted = True
    except OSError as e:
        raise CacheError(f"cannot read {artifact_dir}: {e}") from e

    if marker is not None and marker[0] != key.digest:
        corrupted = True
        marker = None
    if corrupted:
        logger.warning("Corrupted cache marker in %s; treating as miss", artifact_dir)

    if marker is not None and not force:
        return CacheDecision(DecisionKind.HIT, artifact_dir)

    try:
        artifact_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CacheError(f"cannot create {artifact_dir}: {e}") from e
    return CacheDecision(DecisionKind.MISS, artifact_dir, corrupted_marker=corrupted)


def staging_dir_for(decision: CacheDecision) -> Path:
    """A fresh sibling directory that a stage writes into before commit."""
    target = decision.artifact_dir
    staging = target.parent / f".staging-{target.name}-{os.getpid()}-{time.time_ns()}"
    staging.mkdir(parents=True)
    return staging


def _fsync_tree(directory: Path) -> None:
    for path in sorted(directory.rglob("*")):
        if path.is_file():
            with open(path, "rb") as f:
                os.fsync(f.fileno())
    _fsync_dir(directory)


def _fsync_dir(directory: Path) -> None:
    try:
        fd = os.open(directory, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


def _writer_alive(target: Path) -> bool:
    """True while the process that renamed target into place may still write its marker."""
    try:
        pid = int((target / WRITER_NAME).read_text().strip())
    except (OSError, ValueError):
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _write_marker(target: Path, digest: str) -> None:
    tmp = target / f"{MARKER_NAME}.tmp"
    with open(tmp, "w", encoding="ascii") as f:
        f.write(f"{digest}\n{time.time_ns()}\n")
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, target / MARKER_NAME)
    _fsync_dir(target)


def commit_stage(
    key: StageKey,
    decision: CacheDecision,
    staging: Path,
    args: dict[str, Any],
    force: bool = False,
) -> Path:
    """Publish a staged stage output at its digest path, then write the marker.

    Exactly one concurrent committer wins the rename; a loser discards its
    staging directory and waits for the winner's marker.
    """
    target = decision.artifact_dir
    write_snapshot(staging, key, args)
    (staging / WRITER_NAME).write_text(f"{os.getpid()}\n")
    _fsync_tree(staging)

    try:
        os.rename(staging, target)
    except OSError as e:
        if e.errno not in (errno.ENOTEMPTY, errno.EEXIST):
            raise CacheError(f"failed to commit {key.stage_name}: {e}") from e
        if not force and (
            _marker_valid(target, key.digest)
            or (_writer_alive(target) and wait_until(lambda: _marker_valid(target, key.digest), _COMMIT_WAIT))
        ):
            logger.info("Stage %s committed concurrently by another process", key.stage_name)
            shutil.rmtree(staging, ignore_errors=True)
            return target
        # Forced re-run, or leftovers with no live writer: swap the old directory out.
        trash = target.parent / f".trash-{target.name}-{os.getpid()}-{time.time_ns()}"
        try:
            os.rename(target, trash)
            os.rename(staging, target)
        except OSError as e2:
            shutil.rmtree(staging, ignore_errors=True)
            if wait_until(lambda: _marker_valid(target, key.digest), _COMMIT_WAIT):
                return target
            raise CacheError(f"failed to commit {key.stage_name}: {e2}") from e2
        shutil.rmtree(trash, ignore_errors=True)

    _write_marker(target, key.digest)
    (target / WRITER_NAME).unlink(missing_ok=True)
    logger.debug("Committed %s at %s", key.stage_name, target)
    return target


def fresh_root_for(root: Path) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path(root) / "scratch" / f"{stamp}-{os.getpid()}-{time.time_ns() % 1_000_000_000:09d}"


def plan_pipeline(
    cfg: ConfigTree,
    root: Path,
    dataset: str,
    restart_from: str | None = None,
    fresh_root: bool = False,
) -> list[tuple[StageKey, CacheDecision]]:
    """Resolve all seven stages in order.

    Stages at or after restart_from are forced to miss; fresh_root plans into
    a new timestamped root so nothing cached is reused.
    """
    first_forced = len(STAGES)
    if restart_from is not None:
        first_forced = STAGES.index(normalize_stage(restart_from))
    if fresh_root:
        root = fresh_root_for(root)
        logger.info("Restarting from scratch in %s", root)

    plan: list[tuple[StageKey, CacheDecision]] = []
    parent = ROOT_SENTINEL
    for index, stage in enumerate(STAGES):
        key = make_key(stage, canonicalize_args(stage_args(cfg, stage, dataset)), parent)
        decision = resolve_stage(key, root, force=index >= first_forced)
        plan.append((key, decision))
        parent = key.digest
    return plan
