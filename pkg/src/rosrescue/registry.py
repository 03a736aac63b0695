"""In-memory master state machine: registrations, lookups, and the parameter tree.

All mutations and queries are serialized through one lock. Mutations that
change the state bump ``MasterState.version`` and invoke two optional
hooks while still holding the lock: ``on_change(snapshot)`` with an
immutable copy of the new state, and ``notify(topic, subscriber_uris,
publisher_uris)`` for every topic whose publisher set changed. Hooks must
be cheap and non-blocking (enqueue-only); actual I/O belongs on other
threads.
"""
from __future__ import annotations

import copy as _copy
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable

from .names import ValidationError, validate_endpoint_uri, validate_graph_name

log = logging.getLogger(__name__)

Scalar = bool | int | float | str

WILDCARD_TYPE = "*"


class NotFoundError(KeyError):
    """Lookup of a node, service, or parameter that is not registered."""

    def __str__(self) -> str:  # KeyError quotes its message by default
        return self.args[0] if self.args else ""


@dataclass
class TopicRecord:
    datatype: str
    publishers: set[str] = field(default_factory=set)
    subscribers: set[str] = field(default_factory=set)

    def copy(self) -> "TopicRecord":
        return TopicRecord(self.datatype, set(self.publishers), set(self.subscribers))


@dataclass(frozen=True)
class ServiceRecord:
    provider: str
    service_uri: str
    provider_api_uri: str


@dataclass
class MasterState:
    """Complete registry metadata.

    ``version`` increases on every mutation and orders checkpoint-writer
    work within one master lifetime; it is never persisted.
    """

    nodes: dict[str, str] = field(default_factory=dict)
    topics: dict[str, TopicRecord] = field(default_factory=dict)
    services: dict[str, ServiceRecord] = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    version: int = 0

    def copy(self) -> "MasterState":
        return MasterState(
            nodes=dict(self.nodes),
            topics={t: rec.copy() for t, rec in self.topics.items()},
            services=dict(self.services),
            params=_copy.deepcopy(self.params),
            version=self.version,
        )

    def same_content(self, other: "MasterState") -> bool:
        """Equality ignoring the in-memory version counter."""
        return (
            self.nodes == other.nodes
            and self.topics == other.topics
            and self.services == other.services
            and self.params == other.params
        )


def integrity_errors(state: MasterState) -> list[str]:
    """Return invariant violations in ``state`` (empty list when sound)."""
    problems = []
    referenced: set[str] = set()
    for topic, rec in state.topics.items():
        if not rec.publishers and not rec.subscribers:
            problems.append(f"topic {topic} has no publishers or subscribers")
        if not rec.datatype:
            problems.append(f"topic {topic} has an empty datatype")
        if rec.datatype == WILDCARD_TYPE and rec.publishers:
            problems.append(f"topic {topic} has publishers but wildcard datatype")
        for name in rec.publishers | rec.subscribers:
            referenced.add(name)
            if name not in state.nodes:
                problems.append(f"topic {topic} references unknown node {name}")
    for svc, rec in state.services.items():
        referenced.add(rec.provider)
        if rec.provider not in state.nodes:
            problems.append(f"service {svc} references unknown node {rec.provider}")
    for name in state.nodes:
        if name not in referenced:
            problems.append(f"node {name} has no registrations")
    return problems


def _validate_param_value(value: object, key: str) -> None:
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str) or not k or "/" in k or any(c.isspace() for c in k):
                raise ValidationError(f"bad parameter map key {k!r} under {key}")
            _validate_param_value(v, key)
        return
    if not isinstance(value, (bool, int, float, str)):
        raise ValidationError(
            f"parameter {key} must be a scalar or map, got {type(value).__name__}"
        )


NotifyFn = Callable[[str, list[str], list[str]], None]
OnChangeFn = Callable[[MasterState], None]


class Registry:
    """The master's registration/lookup state machine, protocol-independent."""

    def __init__(self, on_change: OnChangeFn | None = None, notify: NotifyFn | None = None):
        self._state = MasterState()
        self._lock = threading.RLock()
        self.on_change = on_change
        self.notify = notify

    # -- registration -------------------------------------------------

    def register_publisher(
        self, caller: str, caller_api: str, topic: str, datatype: str
    ) -> list[str]:
        """Record ``caller`` as a publisher of ``topic``.

        Returns the current subscriber endpoint URIs, sorted by node name.
        Publishers must register a concrete datatype; only subscribers may
        use the ``*`` wildcard.
        """
        validate_graph_name(caller, "caller")
        validate_graph_name(topic, "topic")
        validate_endpoint_uri(caller_api, "caller api")
        if not isinstance(datatype, str) or not datatype or datatype == WILDCARD_TYPE:
            raise ValidationError(f"publisher datatype must be concrete, got {datatype!r}")
        with self._lock:
            changed, dirty_topics = self._upsert_node(caller, caller_api)
            rec = self._state.topics.get(topic)
            if rec is None:
                rec = TopicRecord(datatype=datatype)
                self._state.topics[topic] = rec
            if caller not in rec.publishers:
                rec.publishers.add(caller)
                changed = True
                dirty_topics.add(topic)
            if rec.datatype == WILDCARD_TYPE:
                rec.datatype = datatype
                changed = True
            elif rec.datatype != datatype:
                log.warning(
                    "topic %s type %s kept; publisher %s registered conflicting %s",
                    topic, rec.datatype, caller, datatype,
                )
            subscribers = self._topic_uris(topic, publishers=False)
            self._finish_mutation(changed, dirty_topics)
        return subscribers

    def unregister_publisher(self, caller: str, caller_api: str, topic: str) -> int:
        """Remove one publisher registration; returns 1 if removed, else 0."""
        validate_graph_name(caller, "caller")
        validate_graph_name(topic, "topic")
        validate_endpoint_uri(caller_api, "caller api")
        with self._lock:
            rec = self._state.topics.get(topic)
            if rec is None or caller not in rec.publishers:
                return 0
            if self._state.nodes.get(caller) != caller_api:
                return 0
            rec.publishers.discard(caller)
            self._prune_topic(topic)
            self._prune_node(caller)
            self._finish_mutation(True, {topic})
        return 1

    def register_subscriber(
        self, caller: str, caller_api: str, topic: str, datatype: str
    ) -> list[str]:
        """Record ``caller`` as a subscriber; returns current publisher URIs."""
        validate_graph_name(caller, "caller")
        validate_graph_name(topic, "topic")
        validate_endpoint_uri(caller_api, "caller api")
        if not isinstance(datatype, str) or not datatype:
            raise ValidationError("subscriber datatype must be non-empty")
        with self._lock:
            changed, dirty_topics = self._upsert_node(caller, caller_api)
            rec = self._state.topics.get(topic)
            if rec is None:
                rec = TopicRecord(datatype=datatype)
                self._state.topics[topic] = rec
                changed = True
            if caller not in rec.subscribers:
                rec.subscribers.add(caller)
                changed = True
            if rec.datatype == WILDCARD_TYPE and datatype != WILDCARD_TYPE:
                rec.datatype = datatype
                changed = True
            elif datatype != WILDCARD_TYPE and rec.datatype != datatype:
                log.warning(
                    "topic %s type %s kept; subscriber %s registered conflicting %s",
                    topic, rec.datatype, caller, datatype,
                )
            publishers = self._topic_uris(topic, publishers=True)
            self._finish_mutation(changed, dirty_topics)
        return publishers

    def unregister_subscriber(self, caller: str, caller_api: str, topic: str) -> int:
        validate_graph_name(caller, "caller")
        validate_graph_name(topic, "topic")
        validate_endpoint_uri(caller_api, "caller api")
        with self._lock:
            rec = self._state.topics.get(topic)
            if rec is None or caller not in rec.subscribers:
                return 0
            if self._state.nodes.get(caller) != caller_api:
                return 0
            rec.subscribers.discard(caller)
            self._prune_topic(topic)
            self._prune_node(caller)
            self._finish_mutation(True, set())
        return 1

    def register_service(
        self, caller: str, caller_api: str, service: str, service_uri: str
    ) -> None:
        """Upsert a service provider; a later registration replaces the prior one."""
        validate_graph_name(caller, "caller")
        validate_graph_name(service, "service")
        validate_endpoint_uri(caller_api, "caller api")
        validate_endpoint_uri(service_uri, "service uri")
        with self._lock:
            changed, dirty_topics = self._upsert_node(caller, caller_api)
            old = self._state.services.get(service)
            new = ServiceRecord(provider=caller, service_uri=service_uri,
                                provider_api_uri=caller_api)
            if old != new:
                self._state.services[service] = new
                changed = True
                if old is not None and old.provider != caller:
                    self._prune_node(old.provider)
            self._finish_mutation(changed, dirty_topics)

    def unregister_service(self, caller: str, service: str, service_uri: str) -> int:
        validate_graph_name(caller, "caller")
        validate_graph_name(service, "service")
        validate_endpoint_uri(service_uri, "service uri")
        with self._lock:
            rec = self._state.services.get(service)
            if rec is None or rec.provider != caller or rec.service_uri != service_uri:
                return 0
            del self._state.services[service]
            self._prune_node(caller)
            self._finish_mutation(True, set())
        return 1

    # -- lookups and queries -------------------------------------------

    def lookup_node(self, name: str) -> str:
        validate_graph_name(name, "node")
        with self._lock:
            uri = self._state.nodes.get(name)
        if uri is None:
            raise NotFoundError(f"unknown node {name}")
        return uri

    def lookup_service(self, name: str) -> str:
        validate_graph_name(name, "service")
        with self._lock:
            rec = self._state.services.get(name)
        if rec is None:
            raise NotFoundError(f"unknown service {name}")
        return rec.service_uri

    def get_system_state(self) -> list[list[list]]:
        """Publishers, subscribers, and services, lexicographically sorted."""
        with self._lock:
            pubs = [
                [t, sorted(rec.publishers)]
                for t, rec in sorted(self._state.topics.items())
                if rec.publishers
            ]
            subs = [
                [t, sorted(rec.subscribers)]
                for t, rec in sorted(self._state.topics.items())
                if rec.subscribers
            ]
            srvs = [
                [s, [rec.provider]]
                for s, rec in sorted(self._state.services.items())
            ]
        return [pubs, subs, srvs]

    def get_topic_types(self) -> list[list[str]]:
        with self._lock:
            return [[t, rec.datatype] for t, rec in sorted(self._state.topics.items())]

    def get_published_topics(self) -> list[list[str]]:
        with self._lock:
            return [
                [t, rec.datatype]
                for t, rec in sorted(self._state.topics.items())
                if rec.publishers
            ]

    # -- parameter server ----------------------------------------------

    def set_param(self, key: str, value: object) -> None:
        """Set a scalar or replace a whole subtree at ``key``."""
        validate_graph_name(key, "parameter")
        _validate_param_value(value, key)
        segs = key[1:].split("/")
        with self._lock:
            node = self._state.params
            for seg in segs[:-1]:
                child = node.get(seg)
                if not isinstance(child, dict):
                    child = {}
                    node[seg] = child
                node = child
            old = node.get(segs[-1], _MISSING)
            new = _copy.deepcopy(value)
            if old != new or type(old) is not type(new):
                node[segs[-1]] = new
                self._finish_mutation(True, set())

    def get_param(self, key: str) -> object:
        validate_graph_name(key, "parameter")
        with self._lock:
            found, value = self._walk_param(key)
            if not found:
                raise NotFoundError(f"unknown parameter {key}")
            return _copy.deepcopy(value)

    def delete_param(self, key: str) -> None:
        """Delete a leaf or subtree; empty interior maps along the path are pruned."""
        validate_graph_name(key, "parameter")
        segs = key[1:].split("/")
        with self._lock:
            trail = []
            node = self._state.params
            for seg in segs[:-1]:
                child = node.get(seg)
                if not isinstance(child, dict):
                    raise NotFoundError(f"unknown parameter {key}")
                trail.append((node, seg))
                node = child
            if segs[-1] not in node:
                raise NotFoundError(f"unknown parameter {key}")
            del node[segs[-1]]
            for parent, seg in reversed(trail):
                if parent[seg]:
                    break
                del parent[seg]
            self._finish_mutation(True, set())

    def has_param(self, key: str) -> bool:
        validate_graph_name(key, "parameter")
        with self._lock:
            found, _ = self._walk_param(key)
        return found

    def get_param_names(self) -> list[str]:
        """All scalar leaf paths, sorted."""
        names: list[str] = []

        def collect(prefix: str, node: dict) -> None:
            for seg, value in node.items():
                path = f"{prefix}/{seg}"
                if isinstance(value, dict):
                    collect(path, value)
                else:
                    names.append(path)

        with self._lock:
            collect("", self._state.params)
        return sorted(names)

    # -- snapshots -----------------------------------------------------

    def snapshot(self) -> MasterState:
        """Immutable copy of the state, safe to hand to other threads."""
        with self._lock:
            return self._state.copy()

    def replace_state(self, state: MasterState) -> None:
        """Adopt a recovered state wholesale; the version counter restarts."""
        with self._lock:
            adopted = state.copy()
            adopted.version = 0
            self._state = adopted

    # -- internals -----------------------------------------------------

    def _upsert_node(self, caller: str, caller_api: str) -> tuple[bool, set[str]]:
        """Record the node URI; a new URI supersedes all prior registrations."""
        nodes = self._state.nodes
        old = nodes.get(caller)
        if old == caller_api:
            return False, set()
        dirty: set[str] = set()
        if old is not None:
            log.info("node %s re-registered at %s (was %s); dropping stale registrations",
                     caller, caller_api, old)
            for topic, rec in list(self._state.topics.items()):
                if caller in rec.publishers:
                    rec.publishers.discard(caller)
                    dirty.add(topic)
                rec.subscribers.discard(caller)
                self._prune_topic(topic)
            for service, rec in list(self._state.services.items()):
                if rec.provider == caller:
                    del self._state.services[service]
        nodes[caller] = caller_api
        return True, dirty

    def _prune_topic(self, topic: str) -> None:
        rec = self._state.topics.get(topic)
        if rec is not None and not rec.publishers and not rec.subscribers:
            del self._state.topics[topic]

    def _prune_node(self, name: str) -> None:
        if name not in self._state.nodes:
            return
        for rec in self._state.topics.values():
            if name in rec.publishers or name in rec.subscribers:
                return
        for rec in self._state.services.values():
            if rec.provider == name:
                return
        del self._state.nodes[name]

    def _topic_uris(self, topic: str, publishers: bool) -> list[str]:
        rec = self._state.topics.get(topic)
        if rec is None:
            return []
        names = rec.publishers if publishers else rec.subscribers
        return [self._state.nodes[n] for n in sorted(names)]

    def _finish_mutation(self, changed: bool, dirty_topics: set[str]) -> None:
        """Bump the version and fire hooks; caller must hold the lock."""
        if not changed:
            return
        self._state.version += 1
        if self.on_change is not None:
            self.on_change(self._state.copy())
        if self.notify is not None:
            for topic in sorted(dirty_topics):
                subs = self._topic_uris(topic, publishers=False)
                if subs:
                    self.notify(topic, subs, self._topic_uris(topic, publishers=True))


class _Missing:
    def __eq__(self, other: object) -> bool:
        return False


_MISSING = _Missing()
