"""Startup recovery: load the last checkpoint, reconcile against live nodes.

Nodes may have died while the master was down, so the checkpointed state
is only a starting point: every node in it is probed, unreachable nodes
lose all their registrations, and surviving subscribers are re-sent the
current publisher lists (the master cannot know which pre-crash callbacks
were delivered, so it re-sends for every subscribed topic). Recovery runs
once, before the endpoint answers any request.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .checkpoint import CheckpointLoadError, load_checkpoint
from .registry import MasterState
from .rpcclient import notify_publisher_update, ping_node

ProbeFn = Callable[[str], bool]
SendFn = Callable[[str, str, list[str]], bool]

PROBE_TIMEOUT_MS = 200.0
PROBE_ATTEMPTS = 2
PROBE_FANOUT = 16


class RecoveryError(Exception):
    """Startup must be refused; the checkpoint file needs operator attention."""


@dataclass
class ReconcileReport:
    probed: int = 0
    dropped_nodes: list[str] = field(default_factory=list)
    changed_topics: list[str] = field(default_factory=list)
    notified_subscribers: int = 0
    duration_ms: float = 0.0


def load_last(path: str | Path) -> MasterState:
    """Last checkpointed state; a missing file is a first boot (empty state)."""
    p = Path(path).expanduser()
    if not p.exists():
        return MasterState()
    try:
        return load_checkpoint(p)
    except CheckpointLoadError as e:
        raise RecoveryError(
            f"checkpoint {p} cannot be loaded: {e}. "
            "Inspect or remove the file before restarting."
        ) from None


def default_prober(api_uri: str) -> bool:
    # one retry tolerates a single dropped packet without inflating recovery time
    for _ in range(PROBE_ATTEMPTS):
        if ping_node(api_uri, PROBE_TIMEOUT_MS):
            return True
    return False


def reconcile(
    state: MasterState, prober: ProbeFn, fanout: int = PROBE_FANOUT
) -> tuple[MasterState, ReconcileReport]:
    """Probe every checkpointed node and drop the unreachable ones.

    Probe failures are data, not errors. The returned state satisfies all
    registry invariants; the report lists dropped nodes and every topic
    whose publisher set changed.
    """
    names = sorted(state.nodes)
    report = ReconcileReport(probed=len(names))
    if names:
        with ThreadPoolExecutor(max_workers=min(fanout, len(names))) as pool:
            results = list(pool.map(lambda n: bool(prober(state.nodes[n])), names))
        dead = {n for n, ok in zip(names, results) if not ok}
    else:
        dead = set()

    new_state = state.copy()
    new_state.version = 0
    for name in dead:
        del new_state.nodes[name]
    for topic, rec in list(new_state.topics.items()):
        rec.publishers -= dead
        rec.subscribers -= dead
        if not rec.publishers and not rec.subscribers:
            del new_state.topics[topic]
    for service, rec in list(new_state.services.items()):
        if rec.provider in dead:
            del new_state.services[service]

    changed = []
    for topic, rec in state.topics.items():
        after = new_state.topics.get(topic)
        post_pubs = after.publishers if after is not None else set()
        if rec.publishers != post_pubs:
            changed.append(topic)
    report.dropped_nodes = sorted(dead)
    report.changed_topics = sorted(changed)
    return new_state, report


def renotify(topics: list[str], state: MasterState,
             send: SendFn = notify_publisher_update) -> int:
    """Send every subscriber of the given topics the current publisher list.

    Returns the number of successfully delivered callbacks.
    """
    delivered = 0
    for topic in sorted(topics):
        rec = state.topics.get(topic)
        if rec is None:
            continue
        publisher_uris = [state.nodes[n] for n in sorted(rec.publishers)]
        for sub in sorted(rec.subscribers):
            if send(state.nodes[sub], topic, publisher_uris):
                delivered += 1
    return delivered


def recover(
    checkpoint_path: str | Path,
    prober: ProbeFn = default_prober,
    send: SendFn = notify_publisher_update,
    quiet: bool = False,
) -> tuple[MasterState, ReconcileReport]:
    """load_last -> reconcile -> renotify; returns the adoptable state.

    duration_ms covers load and reconcile only, not the renotify fan-out.
    """
    t0 = time.perf_counter()
    state = load_last(checkpoint_path)
    state, report = reconcile(state, prober)
    report.duration_ms = (time.perf_counter() - t0) * 1000.0
    subscribed = [t for t, rec in state.topics.items() if rec.subscribers]
    report.notified_subscribers = renotify(subscribed, state, send)
    if not quiet:
        print(
            "[rescue] recovered state: nodes={} topics={} services={} "
            "dropped={} notified={} duration_ms={:.3f}".format(
                len(state.nodes), len(state.topics), len(state.services),
                len(report.dropped_nodes), report.notified_subscribers,
                report.duration_ms,
            ),
            flush=True,
        )
    return state, report
