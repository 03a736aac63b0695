"""Durable YAML checkpoints of the master state.

The checkpoint is a single file holding the latest state, overwritten on
every change; there is no operation log to replay. Writes go through a
two-stage commit: serialize to ``<path>.tmp``, flush and fsync, then
atomically rename onto the final path. At any instant the final path is
either absent (nothing committed yet) or a complete snapshot the master
actually held, even if the process dies mid-write or power is lost.
"""
from __future__ import annotations

import copy
import logging
import os
import queue
import threading
import time
from pathlib import Path
from typing import Callable

import yaml

from .names import is_valid_endpoint_uri, is_valid_graph_name
from .registry import MasterState, ServiceRecord, TopicRecord, integrity_errors

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CHECKPOINT_FILE_MODE = 0o655
DEFAULT_CHECKPOINT_PATH = "~/.ros/log/latest-chkpt.yaml"

# Fault-injection hook: called with a stage label ("tmp-written",
# "pre-rename") between the steps of a commit. Production passes None.
CrashHook = Callable[[str], None]


class CheckpointLoadError(Exception):
    """Checkpoint file cannot be turned into a valid state."""


def state_to_document(state: MasterState) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "nodes": dict(state.nodes),
        "topics": {
            t: {
                "type": rec.datatype,
                "publishers": sorted(rec.publishers),
                "subscribers": sorted(rec.subscribers),
            }
            for t, rec in state.topics.items()
        },
        "services": {
            s: {
                "node": rec.provider,
                "service_uri": rec.service_uri,
                "node_uri": rec.provider_api_uri,
            }
            for s, rec in state.services.items()
        },
        "params": copy.deepcopy(state.params),
    }


def serialize(state: MasterState) -> str:
    """Deterministic YAML text; equal states serialize to identical bytes."""
    return yaml.safe_dump(
        state_to_document(state), default_flow_style=False, sort_keys=True
    )


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise CheckpointLoadError(message)


def _check_params(node: object, where: str) -> None:
    if isinstance(node, dict):
        for key, value in node.items():
            _require(isinstance(key, str) and key != "", f"bad parameter key {key!r} {where}")
            _check_params(value, f"under {key}")
        return
    _require(
        isinstance(node, (bool, int, float, str)),
        f"parameter {where} is not a scalar or map: {type(node).__name__}",
    )


def deserialize(text: str) -> MasterState:
    """Parse checkpoint text back into a state, validating every invariant.

    Raises CheckpointLoadError on malformed YAML, an unknown
    schema_version, or any structural violation (dangling node
    references, empty topics, orphan nodes). Never returns a partial
    state.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise CheckpointLoadError(f"unparseable checkpoint: {e}") from None
    _require(isinstance(doc, dict), "checkpoint is not a mapping")
    version = doc.get("schema_version")
    _require(version == SCHEMA_VERSION, f"unsupported schema_version {version!r}")
    missing = {"nodes", "topics", "services", "params"} - doc.keys()
    _require(not missing, f"missing sections: {sorted(missing)}")
    extra = doc.keys() - {"schema_version", "nodes", "topics", "services", "params"}
    _require(not extra, f"unknown sections: {sorted(extra)}")

    nodes_doc, topics_doc = doc["nodes"], doc["topics"]
    services_doc, params_doc = doc["services"], doc["params"]
    for section, value in (("nodes", nodes_doc), ("topics", topics_doc),
                           ("services", services_doc), ("params", params_doc)):
        _require(isinstance(value, dict), f"section {section} is not a mapping")

    state = MasterState()
    for name, uri in nodes_doc.items():
        _require(is_valid_graph_name(name), f"bad node name {name!r}")
        _require(is_valid_endpoint_uri(uri), f"bad node uri {uri!r} for {name}")
        state.nodes[name] = uri
    for topic, rec in topics_doc.items():
        _require(is_valid_graph_name(topic), f"bad topic name {topic!r}")
        _require(
            isinstance(rec, dict) and rec.keys() == {"type", "publishers", "subscribers"},
            f"bad topic record for {topic}",
        )
        _require(isinstance(rec["type"], str), f"bad type for topic {topic}")
        for role in ("publishers", "subscribers"):
            members = rec[role]
            _require(
                isinstance(members, list) and all(is_valid_graph_name(m) for m in members),
                f"bad {role} list for topic {topic}",
            )
        state.topics[topic] = TopicRecord(
            datatype=rec["type"],
            publishers=set(rec["publishers"]),
            subscribers=set(rec["subscribers"]),
        )
    for service, rec in services_doc.items():
        _require(is_valid_graph_name(service), f"bad service name {service!r}")
        _require(
            isinstance(rec, dict) and rec.keys() == {"node", "service_uri", "node_uri"},
            f"bad service record for {service}",
        )
        _require(is_valid_graph_name(rec["node"]), f"bad provider for service {service}")
        for key in ("service_uri", "node_uri"):
            _require(is_valid_endpoint_uri(rec[key]), f"bad {key} for service {service}")
        state.services[service] = ServiceRecord(
            provider=rec["node"],
            service_uri=rec["service_uri"],
            provider_api_uri=rec["node_uri"],
        )
    _check_params(params_doc, "at root")
    state.params = copy.deepcopy(params_doc)

    problems = integrity_errors(state)
    _require(not problems, "invariant violations: " + "; ".join(problems))
    return state


def commit(text: str, final_path: str | Path, crash_hook: CrashHook | None = None) -> None:
    """Two-stage commit of checkpoint text onto ``final_path``.

    Writes ``final_path + ".tmp"``, fsyncs, fixes the permission mode,
    then renames onto the final path and fsyncs the directory. On any
    failure the final path is untouched.
    """
    final_path = Path(final_path)
    tmp_path = final_path.with_name(final_path.name + ".tmp")
    data = text.encode("utf-8")
    try:
        fd = os.open(tmp_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            if crash_hook is not None:
                crash_hook("tmp-written")
            os.fsync(f.fileno())
        os.chmod(tmp_path, CHECKPOINT_FILE_MODE)
        if crash_hook is not None:
            crash_hook("pre-rename")
        os.replace(tmp_path, final_path)
        dir_fd = os.open(final_path.parent, os.O_RDONLY)
        try:
            os.fsync(dir_fd)
        finally:
            os.close(dir_fd)
    except Exception:
        try:
            tmp_path.unlink(missing_ok=True)
        except OSError:
            pass
        raise


def load_checkpoint(path: str | Path) -> MasterState:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CheckpointLoadError(f"cannot read checkpoint {path}: {e}") from None
    return deserialize(text)


_STOP = object()


class CheckpointWriter:
    """Background thread that persists enqueued snapshots, newest wins.

    Producers enqueue immutable state copies in version order; the writer
    coalesces bursts (a snapshot superseded by a newer queued one is
    skipped) but always commits the highest version seen, and never
    commits an older version after a newer one. Failed commits are
    retried with backoff while newer snapshots keep coalescing in.
    """

    def __init__(self, path: str | Path, retry_backoff_s: float = 0.05):
        self.path = Path(path).expanduser()
        self.crash_hook: CrashHook | None = None
        self._queue: queue.Queue = queue.Queue()
        self._cond = threading.Condition()
        self._last_enqueued = -1
        self._last_committed = -1
        self._commit_count = 0
        self._retry_backoff_s = retry_backoff_s
        self._thread = threading.Thread(
            target=self._run, name="checkpoint-writer", daemon=True
        )

    def start(self) -> "CheckpointWriter":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._thread.start()
        return self

    def enqueue(self, snapshot: MasterState) -> None:
        with self._cond:
            self._last_enqueued = max(self._last_enqueued, snapshot.version)
        self._queue.put(snapshot)

    @property
    def commit_count(self) -> int:
        with self._cond:
            return self._commit_count

    @property
    def last_committed_version(self) -> int:
        with self._cond:
            return self._last_committed

    def wait_idle(self, timeout: float = 5.0) -> bool:
        """Block until everything enqueued so far has been committed."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while self._last_committed < self._last_enqueued:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._cond.wait(remaining)
            return True

    def stop(self, timeout: float = 5.0) -> None:
        """Flush the queue and stop the writer thread."""
        self._queue.put(_STOP)
        self._thread.join(timeout)

    def _run(self) -> None:
        pending: MasterState | None = None
        stopping = False
        backoff = self._retry_backoff_s
        failures = 0
        while True:
            if pending is None:
                if stopping:
                    return
                item = self._queue.get()
                if item is _STOP:
                    return
                pending = item
            while True:  # coalesce: newest queued version wins
                try:
                    item = self._queue.get_nowait()
                except queue.Empty:
                    break
                if item is _STOP:
                    stopping = True
                    break
                if item.version > pending.version:
                    pending = item
            if pending.version <= self._last_committed:
                pending = None
                continue
            try:
                commit(serialize(pending), self.path, crash_hook=self.crash_hook)
            except Exception as e:
                failures += 1
                log.warning("checkpoint commit failed (%s); retry in %.2fs", e, backoff)
                if stopping and failures >= 3:
                    log.error("giving up on final checkpoint after %d failures", failures)
                    return
                time.sleep(backoff)
                backoff = min(backoff * 2, 1.0)
                continue
            with self._cond:
                self._last_committed = pending.version
                self._commit_count += 1
                self._cond.notify_all()
            pending = None
            backoff = self._retry_backoff_s
            failures = 0
