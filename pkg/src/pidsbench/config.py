"""Configuration management for pidsbench.

Two layers live here:

* process settings (cache root, data dir, config dir) read from environment
  variables merged over defaults, and
* experiment configurations: YAML documents that inherit from each other via
  ``_include_yml``, accept dotted command-line overrides and are validated
  against a stage schema before a pipeline runs.
"""

import copy
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import yaml

from pidsbench.errors import ConfigError

logger = logging.getLogger(__name__)


_DEFAULTS: dict[str, str] = {
    "cache_root": "./artifacts",
    "data_dir": "./data",
    "config_dir": "./config",
}

_ENV_VARS: dict[str, str] = {
    "cache_root": "PIDSBENCH_CACHE_ROOT",
    "data_dir": "PIDSBENCH_DATA_DIR",
    "config_dir": "PIDSBENCH_CONFIG_DIR",
}


def get_settings() -> dict[str, str]:
    """Return process settings, environment variables winning over defaults."""
    return {k: os.environ.get(_ENV_VARS[k]) or v for k, v in _DEFAULTS.items()}


def get_cache_root() -> Path:
    """Return the absolute path of the stage cache root."""
    return Path(get_settings()["cache_root"]).expanduser().absolute()


def get_data_dir() -> Path:
    """Return the absolute path of the dataset directory."""
    return Path(get_settings()["data_dir"]).expanduser().absolute()


def get_config_dir() -> Path:
    """Return the absolute path of the system config directory."""
    return Path(get_settings()["config_dir"]).expanduser().absolute()


INCLUDE_KEY = "_include_yml"

STAGE_SECTIONS = (
    "construction",
    "transformation",
    "featurization",
    "batching",
    "training",
    "evaluation",
    "triage",
)


@dataclass(frozen=True)
class ConfigTree:
    """A resolved configuration and the files it was merged from (base first)."""

    root: dict[str, Any]
    source_chain: tuple[str, ...] = ()

    def get(self, dotted_path: str, default: Any = None) -> Any:
        node: Any = self.root
        for seg in dotted_path.split("."):
            if not isinstance(node, dict) or seg not in node:
                return default
            node = node[seg]
        return copy.deepcopy(node)

    def section(self, name: str) -> dict[str, Any]:
        value = self.root.get(name, {})
        return copy.deepcopy(value) if isinstance(value, dict) else {}

    def to_dict(self) -> dict[str, Any]:
        return copy.deepcopy(self.root)


@dataclass(frozen=True)
class OverrideSet:
    """Ordered dotted-path overrides; a later entry for the same path wins."""

    entries: tuple[tuple[str, str], ...] = ()

    def __iter__(self) -> Iterator[tuple[str, str]]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def extend(self, other: "OverrideSet") -> "OverrideSet":
        return OverrideSet(self.entries + other.entries)

    def as_dict(self) -> dict[str, str]:
        return dict(self.entries)


@dataclass(frozen=True)
class Violation:
    path: str
    reason: str

    def __str__(self) -> str:
        return f"{self.path}: {self.reason}"


@dataclass(frozen=True)
class StageSchema:
    """What a runnable config must contain.

    ``leaf_kinds`` maps dotted paths to one of int, float, bool, str, list.
    Paths listed there may also be created by overrides when absent.
    ``allowed_methods`` maps ``used_method(s)`` paths to their accepted values.
    """

    required_sections: tuple[str, ...]
    allowed_methods: dict[str, tuple[str, ...]] = field(default_factory=dict)
    leaf_kinds: dict[str, str] = field(default_factory=dict)
    required_leaves: tuple[str, ...] = ()


DEFAULT_SCHEMA = StageSchema(
    required_sections=STAGE_SECTIONS,
    allowed_methods={
        "transformation.used_methods": ("none", "undirected", "remove_redundant", "dag", "pseudo_root"),
        "featurization.used_method": ("word2vec", "fasttext", "hfh"),
        "batching.global_batching.used_method": ("none", "edges", "minutes"),
        "batching.intra_graph_batching.used_methods": ("none", "edges", "minutes", "tgn_last_neighbor"),
        "batching.inter_graph_batching.used_method": ("none", "graph_batching"),
        "training.encoder.used_methods": ("linear", "sage", "tgn", "none"),
        "training.encoder.linear.activation": ("relu", "tanh"),
        "training.encoder.sage.activation": ("relu", "tanh"),
        "training.decoder.used_method": ("mlp",),
        "training.decoder.mlp.activation": ("relu", "tanh"),
        "training.objective.used_method": ("edge_type", "node_type", "feat_recon"),
        "evaluation.used_method": ("node_evaluation",),
        "evaluation.node_evaluation.threshold_method": ("fixed", "max_val_loss", "mean_val_loss", "kmeans"),
        "evaluation.node_evaluation.score_reduce": ("max", "mean"),
        "triage.used_method": ("none", "score", "depimpact"),
    },
    leaf_kinds={
        "construction.window_minutes": "int",
        "construction.reorder_slack_seconds": "int",
        "construction.max_malformed_ratio": "float",
        "construction.node_features.subject": "list",
        "construction.node_features.file": "list",
        "construction.node_features.netflow": "list",
        "transformation.used_methods": "list",
        "featurization.used_method": "str",
        "featurization.emb_dim": "int",
        "featurization.epochs": "int",
        "featurization.seed": "int",
        "featurization.word2vec.alpha": "float",
        "featurization.word2vec.window_size": "int",
        "featurization.word2vec.min_count": "int",
        "featurization.word2vec.negative": "int",
        "featurization.word2vec.num_workers": "int",
        "featurization.fasttext.alpha": "float",
        "featurization.fasttext.window_size": "int",
        "featurization.fasttext.min_count": "int",
        "featurization.fasttext.negative": "int",
        "featurization.fasttext.num_workers": "int",
        "batching.global_batching.used_method": "str",
        "batching.global_batching.size": "int",
        "batching.intra_graph_batching.used_methods": "list",
        "batching.intra_graph_batching.size": "int",
        "batching.intra_graph_batching.tgn_last_neighbor.k": "int",
        "batching.inter_graph_batching.used_method": "str",
        "batching.inter_graph_batching.batch_size": "int",
        "training.lr": "float",
        "training.num_epochs": "int",
        "training.node_hid_dim": "int",
        "training.seed": "int",
        "training.num_workers": "int",
        "training.encoder.used_methods": "list",
        "training.encoder.linear.activation": "str",
        "training.encoder.sage.activation": "str",
        "training.encoder.sage.num_layers": "int",
        "training.encoder.tgn.activation": "str",
        "training.decoder.used_method": "str",
        "training.decoder.mlp.hidden_dim": "int",
        "training.decoder.mlp.activation": "str",
        "training.objective.used_method": "str",
        "evaluation.used_method": "str",
        "evaluation.node_evaluation.threshold_method": "str",
        "evaluation.node_evaluation.fixed_threshold": "float",
        "evaluation.node_evaluation.score_reduce": "str",
        "evaluation.node_evaluation.use_dst_node_loss": "bool",
        "evaluation.node_evaluation.use_kmeans": "bool",
        "evaluation.node_evaluation.kmeans_top_k": "int",
        "evaluation.node_evaluation.kmeans_iters": "int",
        "evaluation.node_evaluation.top_k": "int",
        "evaluation.node_evaluation.histogram_bins": "int",
        "triage.used_method": "str",
        "triage.use_kmeans": "bool",
    },
    required_leaves=(
        "construction.window_minutes",
        "featurization.used_method",
        "featurization.emb_dim",
        "training.lr",
        "training.num_epochs",
        "training.node_hid_dim",
        "training.encoder.used_methods",
        "training.objective.used_method",
        "evaluation.node_evaluation.threshold_method",
    ),
)


def method_list(value: Any) -> list[str]:
    """Split a ``used_methods`` value (list or comma string) into tokens, dropping ``none``."""
    if value is None:
        return []
    items = value if isinstance(value, list) else str(value).split(",")
    tokens = [str(item).strip() for item in items]
    return [t for t in tokens if t and t != "none"]


# ---------------------------------------------------------------------------
# Loading and merging
# ---------------------------------------------------------------------------


def deep_merge(base: dict[str, Any], child: dict[str, Any]) -> dict[str, Any]:
    """Merge child over base: maps merge recursively, scalars and lists replace."""
    merged = copy.deepcopy(base)
    for key, value in child.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _check_keys(node: dict[str, Any], origin: str, prefix: str = "") -> None:
    for key, value in node.items():
        if not isinstance(key, str) or not key:
            raise ConfigError(f"keys must be non-empty strings (in {origin})", prefix or "<root>")
        if "." in key:
            raise ConfigError(f"key '{key}' contains a dot (in {origin})", prefix or "<root>")
        if isinstance(value, dict):
            _check_keys(value, origin, f"{prefix}.{key}" if prefix else key)


def resolve_include(name: str, search_dir: str | Path) -> Path:
    """Map a system name (``orthrus`` or ``orthrus.yml``) to its file in search_dir."""
    search_dir = Path(search_dir)
    stem = str(name)
    if stem.endswith((".yml", ".yaml")):
        return search_dir / stem
    for suffix in (".yml", ".yaml"):
        candidate = search_dir / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    return search_dir / f"{stem}.yml"


def _read_document(path: Path) -> dict[str, Any]:
    if not path.is_file():
        raise ConfigError("config file not found", str(path))
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"failed to parse YAML: {e}", str(path)) from e
    except OSError as e:
        raise ConfigError(f"failed to read config: {e}", str(path)) from e
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError("top level of a config must be a mapping", str(path))
    return doc


def load_config(
    path: str | Path,
    search_dir: str | Path,
    _chain: tuple[str, ...] = (),
) -> ConfigTree:
    """Load a config, resolving ``_include_yml`` bases from search_dir.

    The base is loaded first and the child merged over it; the include key is
    dropped from the result. Include cycles raise ConfigError naming the files.
    """
    resolved = str(Path(path).expanduser().absolute())
    if resolved in _chain:
        includer = _chain[-1]
        raise ConfigError(f"include cycle between {includer} and {resolved}", resolved)

    doc = _read_document(Path(resolved))
    include = doc.pop(INCLUDE_KEY, None)
    _check_keys(doc, resolved)

    if include is None:
        return ConfigTree(root=doc, source_chain=(resolved,))

    base = load_config(resolve_include(include, search_dir), search_dir, _chain + (resolved,))
    logger.debug("Merged %s over %s", resolved, base.source_chain[-1])
    return ConfigTree(root=deep_merge(base.root, doc), source_chain=base.source_chain + (resolved,))


def merge_overlay(cfg: ConfigTree, overlay: ConfigTree) -> ConfigTree:
    """Merge an overlay tree over cfg with the same semantics as ``_include_yml``."""
    return ConfigTree(
        root=deep_merge(cfg.root, overlay.root),
        source_chain=cfg.source_chain + overlay.source_chain,
    )


# ---------------------------------------------------------------------------
# Overrides
# ---------------------------------------------------------------------------


def parse_override_args(args: Iterable[str]) -> OverrideSet:
    """Turn ``--a.b=value`` tokens into an OverrideSet, preserving order."""
    entries: list[tuple[str, str]] = []
    for token in args:
        if not token.startswith("--") or "=" not in token:
            raise ConfigError(f"override must look like --<path>=<value>: {token!r}")
        path, raw = token[2:].split("=", 1)
        entries.append((path, raw))
    return OverrideSet(tuple(entries))


def _kind_of(value: Any) -> str | None:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    if isinstance(value, list):
        return "list"
    if isinstance(value, str):
        return "str"
    return None


def _coerce(raw: str, kind: str | None, path: str, element_kind: str | None = None) -> Any:
    text = raw.strip()
    if kind == "bool":
        lowered = text.lower()
        if lowered == "true":
            return True
        if lowered == "false":
            return False
        raise ConfigError(f"cannot coerce {raw!r} to bool (expected true or false)", path)
    if kind == "int":
        try:
            return int(text, 10)
        except ValueError:
            raise ConfigError(f"cannot coerce {raw!r} to int", path) from None
    if kind == "float":
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"cannot coerce {raw!r} to float", path) from None
    if kind == "list":
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return [_coerce(p, element_kind or "str", path) for p in parts]
    return raw


def coerce_override(raw: str, prior: Any, path: str, schema_kind: str | None = None) -> Any:
    """Coerce raw text to the kind of the leaf it replaces."""
    kind = _kind_of(prior) or schema_kind
    element_kind = None
    if kind == "list" and isinstance(prior, list) and prior:
        kinds = {_kind_of(v) for v in prior}
        element_kind = kinds.pop() if len(kinds) == 1 else "str"
    return _coerce(raw, kind, path, element_kind)


def apply_overrides(
    cfg: ConfigTree,
    ov: OverrideSet,
    schema: StageSchema = DEFAULT_SCHEMA,
) -> ConfigTree:
    """Apply dotted overrides in order.

    Each path must address an existing leaf, or a leaf the schema declares
    under a stage section. Anything else is rejected so that misspelled flags
    never create keys.
    """
    root = copy.deepcopy(cfg.root)
    for path, raw in ov:
        segs = path.split(".")
        if any(not s for s in segs):
            raise ConfigError("malformed override path", path)

        node: Any = root
        declared = path in schema.leaf_kinds and segs[0] in STAGE_SECTIONS
        for seg in segs[:-1]:
            child = node.get(seg) if isinstance(node, dict) else None
            if child is None and declared:
                child = node[seg] = {}
            if not isinstance(child, dict):
                raise ConfigError("unknown override path", path)
            node = child

        leaf = segs[-1]
        if leaf in node:
            if isinstance(node[leaf], dict):
                raise ConfigError("override path addresses a section, not a leaf", path)
            node[leaf] = coerce_override(raw, node[leaf], path, schema.leaf_kinds.get(path))
        elif declared:
            node[leaf] = coerce_override(raw, None, path, schema.leaf_kinds[path])
        else:
            raise ConfigError("unknown override path", path)
        logger.debug("Override %s=%r", path, node[leaf])
    return ConfigTree(root=root, source_chain=cfg.source_chain)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _lookup(root: dict[str, Any], path: str) -> tuple[bool, Any]:
    node: Any = root
    for seg in path.split("."):
        if not isinstance(node, dict) or seg not in node:
            return False, None
        node = node[seg]
    return True, node


def _kind_matches(value: Any, kind: str) -> bool:
    if kind == "bool":
        return isinstance(value, bool)
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == "list":
        return isinstance(value, (list, str))
    if kind == "str":
        return isinstance(value, str)
    return True


def validate_config(cfg: ConfigTree, schema: StageSchema = DEFAULT_SCHEMA) -> list[Violation]:
    """Return every reason cfg cannot run; an empty list means runnable."""
    violations: list[Violation] = []
    root = cfg.root

    for section in schema.required_sections:
        if section not in root:
            violations.append(Violation(section, "missing required section"))
        elif not isinstance(root[section], dict):
            violations.append(Violation(section, "section must be a mapping"))

    for path in schema.required_leaves:
        if path.split(".")[0] in root and not _lookup(root, path)[0]:
            violations.append(Violation(path, "missing required parameter"))

    for path, kind in schema.leaf_kinds.items():
        present, value = _lookup(root, path)
        if present and value is not None and not _kind_matches(value, kind):
            violations.append(Violation(path, f"expected {kind}, got {type(value).__name__}"))

    for path, allowed in schema.allowed_methods.items():
        present, value = _lookup(root, path)
        if not present or value is None:
            continue
        items = value if isinstance(value, list) else str(value).split(",")
        for item in (str(i).strip() for i in items):
            if item and item not in allowed:
                violations.append(
                    Violation(path, f"unknown method '{item}'; allowed: {', '.join(allowed)}")
                )

    violations.extend(_cross_checks(cfg))
    return violations


def _cross_checks(cfg: ConfigTree) -> list[Violation]:
    out: list[Violation] = []

    encoders = method_list(cfg.get("training.encoder.used_methods"))
    if cfg.get("training.encoder.used_methods") is not None and len(encoders) > 1:
        out.append(Violation("training.encoder.used_methods", "exactly one encoder may be selected"))
    if "tgn" in encoders:
        intra = method_list(cfg.get("batching.intra_graph_batching.used_methods"))
        if "tgn_last_neighbor" not in intra:
            out.append(Violation(
                "training.encoder.used_methods",
                "tgn encoder requires batching.intra_graph_batching.used_methods to include tgn_last_neighbor",
            ))

    layers = cfg.get("training.encoder.sage.num_layers")
    if isinstance(layers, int) and not 1 <= layers <= 2:
        out.append(Violation("training.encoder.sage.num_layers", "must be 1 or 2"))

    hid = cfg.get("training.node_hid_dim")
    if isinstance(hid, int) and hid < 4:
        out.append(Violation("training.node_hid_dim", "must be at least 4"))

    for path in ("training.num_epochs", "featurization.epochs"):
        epochs = cfg.get(path)
        if isinstance(epochs, int) and epochs < 1:
            out.append(Violation(path, "must be at least 1"))

    window = cfg.get("construction.window_minutes")
    if isinstance(window, int) and window < 1:
        out.append(Violation("construction.window_minutes", "must be at least 1"))

    intra = method_list(cfg.get("batching.intra_graph_batching.used_methods"))
    if "edges" in intra and "minutes" in intra:
        out.append(Violation(
            "batching.intra_graph_batching.used_methods", "edges and minutes are mutually exclusive",
        ))

    emb_dim = cfg.get("featurization.emb_dim")
    if cfg.get("featurization.used_method") == "hfh" and isinstance(emb_dim, int):
        if emb_dim < 8 or emb_dim % 4:
            out.append(Violation("featurization.emb_dim", "hfh needs emb_dim >= 8 and divisible by 4"))

    return out
