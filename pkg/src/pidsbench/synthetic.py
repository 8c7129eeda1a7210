"""Desk-scale synthetic provenance datasets.

Benign background is a small library of service templates: each session of a
service executes its binary, reads its configuration, writes its logs and,
for some services, contacts a fixed remote endpoint. One service also
beacons to its endpoint at a fixed period across the whole span. Attack
chains sit in the final third of the span and use fresh entities only.
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from pidsbench.errors import IngestError
from pidsbench.ingest import NS_PER_MINUTE, NS_PER_SECOND

logger = logging.getLogger(__name__)

BASE_TS = 26_666_667 * NS_PER_MINUTE
NS_PER_HOUR = 60 * NS_PER_MINUTE
MIN_BENIGN_EVENTS = 1000
MIN_SPAN_HOURS = 3
ATTACK_MARGIN_NS = 30 * NS_PER_MINUTE
BEACON_PERIOD_NS = 5 * NS_PER_MINUTE


@dataclass(frozen=True)
class ServiceTemplate:
    path: str
    cmd_line: str
    reads: tuple[str, ...]
    writes: tuple[str, ...]
    beacon: tuple[str, str] | None = None


TEMPLATES = (
    ServiceTemplate("/usr/sbin/sshd", "sshd -D", ("/etc/ssh/sshd_config", "/etc/passwd"), ("/var/log/auth.log",)),
    ServiceTemplate("/usr/sbin/cron", "cron -f", ("/etc/crontab",), ("/var/log/cron.log",)),
    ServiceTemplate(
        "/usr/bin/python3", "python3 /opt/app/worker.py",
        ("/opt/app/config.yaml", "/opt/app/worker.py"), ("/var/log/app/worker.log", "/var/tmp/worker.state"),
        ("10.0.0.12", "5432"),
    ),
    ServiceTemplate(
        "/usr/sbin/nginx", "nginx -g daemon_off",
        ("/etc/nginx/nginx.conf", "/var/www/index.html"), ("/var/log/nginx/access.log",),
        ("10.0.0.20", "443"),
    ),
    ServiceTemplate(
        "/usr/sbin/rsyslogd", "rsyslogd -n", ("/etc/rsyslog.conf",), ("/var/log/syslog",),
        ("10.0.0.30", "514"),
    ),
    ServiceTemplate(
        "/usr/bin/rsync", "rsync -a /var/lib/db backup",
        ("/var/lib/db/data.db",), ("/var/backups/db.bak",),
        ("10.0.0.40", "873"),
    ),
)

BEACON_TEMPLATE = TEMPLATES[4]

SENSITIVE_FILES = (
    "/home/admin/.ssh/id_rsa",
    "/root/.aws/credentials",
    "/home/admin/.gnupg/secring.gpg",
    "/srv/finance/payroll.xlsx",
)


def _entity_id(*parts: object) -> str:
    return hashlib.blake2b(":".join(map(str, parts)).encode(), digest_size=16).hexdigest()


def _subject(eid: str, path: str, cmd_line: str) -> dict:
    return {"id": eid, "kind": "subject", "path": path, "cmd_line": cmd_line}


def _file(path: str) -> dict:
    return {"id": _entity_id("file", path), "kind": "file", "path": path}


def _netflow(ip: str, port: str, eid: str | None = None) -> dict:
    return {"id": eid or _entity_id("netflow", ip, port), "kind": "netflow",
            "remote_ip": ip, "remote_port": port}


def _session_events(template: ServiceTemplate, session: int, start: int, rng: np.random.Generator) -> list[tuple]:
    subj = _subject(_entity_id("subject", template.path, session), template.path, template.cmd_line)
    steps = [("execute", _file(template.path))]
    steps += [("read", _file(p)) for p in template.reads]
    steps += [("write", _file(p)) for p in template.writes]
    if template.beacon is not None:
        steps.append(("send", _netflow(*template.beacon)))
    events = []
    ts = start
    for op, dst in steps:
        events.append((ts, op, subj, dst))
        ts += int(rng.integers(1, 1000)) * 1_000_000
    return events


def _beacon_events(template: ServiceTemplate, start: int, end: int) -> list[tuple]:
    """One long-lived process sending to its endpoint every BEACON_PERIOD_NS."""
    subj = _subject(_entity_id("beacon", template.path), template.path, template.cmd_line)
    flow = _netflow(*template.beacon)
    return [(ts, "send", subj, flow) for ts in range(start, end, BEACON_PERIOD_NS)]


def _attack_events(chain: int, start: int) -> list[tuple]:
    """connect, execute payload, read sensitive file, exfiltrate."""
    subj = _subject(_entity_id("attack", chain, "subject"), f"/tmp/.cache/upd{chain}", f"upd{chain} --silent")
    flow = _netflow(f"203.0.113.{10 + chain}", "4444", _entity_id("attack", chain, "netflow"))
    payload = {"id": _entity_id("attack", chain, "payload"), "kind": "file", "path": f"/tmp/.cache/payload{chain}.bin"}
    secret_path = SENSITIVE_FILES[(chain - 1) % len(SENSITIVE_FILES)]
    secret = {"id": _entity_id("attack", chain, "secret"), "kind": "file", "path": secret_path}
    second = NS_PER_SECOND
    return [
        (start, "connect", subj, flow),
        (start + second, "execute", subj, payload),
        (start + 2 * second, "read", subj, secret),
        (start + 3 * second, "send", subj, flow),
    ]


def generate_synthetic(
    seed: int,
    n_benign_events: int,
    n_attack_chains: int,
    span_hours: int,
    out_dir: str | Path,
    dataset_id: str = "SYNTHETIC",
) -> tuple[Path, Path]:
    """Write events.jsonl, labels.csv and dataset.yml into out_dir.

    Returns the event and label paths. Output bytes depend only on the arguments.
    """
    if n_benign_events < MIN_BENIGN_EVENTS:
        raise IngestError(f"n_benign_events must be >= {MIN_BENIGN_EVENTS}, got {n_benign_events}")
    if n_attack_chains < 0:
        raise IngestError(f"n_attack_chains must be >= 0, got {n_attack_chains}")
    if span_hours < MIN_SPAN_HOURS:
        raise IngestError(f"span_hours must be >= {MIN_SPAN_HOURS}, got {span_hours}")

    rng = np.random.default_rng(seed)
    span = span_hours * NS_PER_HOUR
    train_end = BASE_TS + span // 3
    val_end = BASE_TS + 2 * span // 3
    end = BASE_TS + span

    raw: list[tuple] = _beacon_events(BEACON_TEMPLATE, BASE_TS, BASE_TS + span)[:n_benign_events]
    session = 0
    while len(raw) < n_benign_events:
        template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
        # The first session pins window alignment to BASE_TS.
        start = BASE_TS if session == 0 else BASE_TS + int(rng.integers(0, span - 10 * NS_PER_SECOND))
        raw.extend(_session_events(template, session, start, rng)[: n_benign_events - len(raw)])
        session += 1

    labels: dict[str, int] = {}
    attack_lo = val_end + ATTACK_MARGIN_NS
    attack_hi = end - 10 * NS_PER_SECOND
    for chain in range(1, n_attack_chains + 1):
        start = int(rng.integers(attack_lo, attack_hi))
        chain_events = _attack_events(chain, start)
        raw.extend(chain_events)
        for _, _, src, dst in chain_events:
            labels[src["id"]] = chain
            labels[dst["id"]] = chain

    raw.sort(key=lambda e: (e[0], e[2]["id"], e[3]["id"], e[1]))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    events_path = out / "events.jsonl"
    labels_path = out / "labels.csv"
    with open(events_path, "w", encoding="utf-8") as f:
        for event_id, (ts, op, src, dst) in enumerate(raw, start=1):
            rec = {"id": event_id, "ts": ts, "op": op, "src": src, "dst": dst}
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    labels_path.write_text("".join(f"{node},{attack}\n" for node, attack in sorted(labels.items())))
    manifest = {"dataset_id": dataset_id, "train_end": train_end, "val_end": val_end, "seed": seed}
    (out / "dataset.yml").write_text(yaml.safe_dump(manifest, sort_keys=True))

    logger.info(
        "Generated %d events (%d attack chains, %d labeled nodes) in %s",
        len(raw), n_attack_chains, len(labels), out,
    )
    return events_path, labels_path
