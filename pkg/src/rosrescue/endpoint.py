"""XML-RPC endpoint exposing the registry under the master API method names.

Every method returns a ``[code, statusMessage, value]`` triple: 1 on
success, 0 or -1 on failure, and the value slot always present (0 or ""
when there is nothing meaningful to return). Request handling is
multi-threaded; registry access is serialized inside :class:`Registry`,
and publisher-update callbacks go out on a dedicated dispatcher thread so
slow subscribers never block registrations.
"""
from __future__ import annotations

import logging
import os
import queue
import socketserver
import threading
from dataclasses import dataclass, field
from pathlib import Path
from xmlrpc.server import SimpleXMLRPCRequestHandler, SimpleXMLRPCServer

from .checkpoint import DEFAULT_CHECKPOINT_PATH, CheckpointWriter
from .names import ValidationError
from .registry import NotFoundError, Registry
from .rpcclient import notify_publisher_update

log = logging.getLogger(__name__)

RESCUE_BANNER = "ROS Rescue enabled. Master is now fault tolerant!!"
DEFAULT_PORT = 11311

CRASH_IMMEDIATE = "immediate"
CRASH_DURING_CHECKPOINT = "during-checkpoint-write"
CRASH_BEFORE_NOTIFY = "before-notify"
CRASH_MODES = (CRASH_IMMEDIATE, CRASH_DURING_CHECKPOINT, CRASH_BEFORE_NOTIFY)


@dataclass
class MasterEndpointConfig:
    bind_host: str = "127.0.0.1"
    port: int = DEFAULT_PORT
    rescue_enabled: bool = False
    checkpoint_path: Path = field(
        default_factory=lambda: Path(DEFAULT_CHECKPOINT_PATH).expanduser()
    )
    test_hooks: bool = False
    notify_timeout_s: float = 0.5

    def __post_init__(self) -> None:
        if not 0 < self.port <= 65535:
            raise ValueError(f"port {self.port} out of range")
        self.checkpoint_path = Path(self.checkpoint_path).expanduser()


class NotificationDispatcher:
    """Serial best-effort delivery of publisherUpdate callbacks."""

    def __init__(self, timeout_s: float = 0.5):
        self._timeout_s = timeout_s
        self._queue: queue.Queue = queue.Queue()
        self._cond = threading.Condition()
        self._outstanding = 0
        self.delivered = 0
        self.failed = 0
        self._thread = threading.Thread(
            target=self._run, name="publisher-update-dispatcher", daemon=True
        )
        self._thread.start()

    def submit(self, subscriber_api: str, topic: str, publisher_uris: list[str]) -> None:
        with self._cond:
            self._outstanding += 1
        self._queue.put((subscriber_api, topic, publisher_uris))

    def wait_idle(self, timeout: float = 5.0) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: self._outstanding == 0, timeout)

    def stop(self) -> None:
        self._queue.put(None)
        self._thread.join(2.0)

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            subscriber_api, topic, publisher_uris = item
            ok = notify_publisher_update(
                subscriber_api, topic, publisher_uris, timeout_s=self._timeout_s
            )
            with self._cond:
                self._outstanding -= 1
                if ok:
                    self.delivered += 1
                else:
                    self.failed += 1
                self._cond.notify_all()


class _RequestHandler(SimpleXMLRPCRequestHandler):
    # quieten per-request BaseHTTPServer noise on stderr
    def log_message(self, format, *args):  # noqa: A002 - stdlib signature
        pass


class _ThreadingXMLRPCServer(socketserver.ThreadingMixIn, SimpleXMLRPCServer):
    daemon_threads = True
    allow_reuse_address = True


class MasterEndpoint:
    """Binds the master API server; requests are answered after start()."""

    def __init__(self, config: MasterEndpointConfig, registry: Registry,
                 writer: CheckpointWriter | None = None):
        self.config = config
        self.registry = registry
        self.writer = writer
        self.notifier = NotificationDispatcher(timeout_s=config.notify_timeout_s)
        registry.notify = self._on_topic_change
        self._crash_before_notify = False
        self._server = _ThreadingXMLRPCServer(
            (config.bind_host, config.port),
            requestHandler=_RequestHandler,
            logRequests=False,
            allow_none=False,
        )
        self._server.register_instance(_MethodDispatcher(self))
        self._thread: threading.Thread | None = None
        self._methods = {
            "registerPublisher": self._register_publisher,
            "unregisterPublisher": self._unregister_publisher,
            "registerSubscriber": self._register_subscriber,
            "unregisterSubscriber": self._unregister_subscriber,
            "registerService": self._register_service,
            "unregisterService": self._unregister_service,
            "lookupNode": self._lookup_node,
            "lookupService": self._lookup_service,
            "getSystemState": self._get_system_state,
            "getPublishedTopics": self._get_published_topics,
            "getTopicTypes": self._get_topic_types,
            "getUri": self._get_uri,
            "getPid": self._get_pid,
            "setParam": self._set_param,
            "getParam": self._get_param,
            "deleteParam": self._delete_param,
            "hasParam": self._has_param,
            "getParamNames": self._get_param_names,
        }
        if config.test_hooks:
            self._methods["injectCrash"] = self._inject_crash

    @property
    def uri(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{self.config.bind_host}:{port}/"

    def start(self) -> None:
        """Serve requests on a background thread."""
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="master-endpoint", daemon=True
        )
        self._thread.start()

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self.notifier.stop()

    # -- dispatch --------------------------------------------------------

    def dispatch(self, method: str, args: list) -> list:
        handler = self._methods.get(method)
        if handler is None:
            return [-1, f"unknown method {method}", 0]
        try:
            return handler(*args)
        except ValidationError as e:
            return [-1, str(e), 0]
        except TypeError as e:
            return [-1, f"bad arguments for {method}: {e}", 0]

    # -- registration methods (first argument is always caller_id) --------

    def _register_publisher(self, caller_id, topic, datatype, caller_api):
        subs = self.registry.register_publisher(caller_id, caller_api, topic, datatype)
        return [1, f"registered {caller_id} as publisher of {topic}", subs]

    def _unregister_publisher(self, caller_id, topic, caller_api):
        n = self.registry.unregister_publisher(caller_id, caller_api, topic)
        return [1, f"unregistered {caller_id} as publisher of {topic}", n]

    def _register_subscriber(self, caller_id, topic, datatype, caller_api):
        pubs = self.registry.register_subscriber(caller_id, caller_api, topic, datatype)
        return [1, f"registered {caller_id} as subscriber to {topic}", pubs]

    def _unregister_subscriber(self, caller_id, topic, caller_api):
        n = self.registry.unregister_subscriber(caller_id, caller_api, topic)
        return [1, f"unregistered {caller_id} as subscriber to {topic}", n]

    def _register_service(self, caller_id, service, service_uri, caller_api):
        self.registry.register_service(caller_id, caller_api, service, service_uri)
        return [1, f"registered {caller_id} as provider of {service}", 0]

    def _unregister_service(self, caller_id, service, service_uri):
        n = self.registry.unregister_service(caller_id, service, service_uri)
        return [1, f"unregistered {caller_id} as provider of {service}", n]

    # -- lookups and queries ----------------------------------------------

    def _lookup_node(self, caller_id, name):
        try:
            return [1, f"node api {name}", self.registry.lookup_node(name)]
        except NotFoundError as e:
            return [-1, str(e), ""]

    def _lookup_service(self, caller_id, name):
        try:
            return [1, f"service uri {name}", self.registry.lookup_service(name)]
        except NotFoundError as e:
            return [-1, str(e), ""]

    def _get_system_state(self, caller_id):
        return [1, "current system state", self.registry.get_system_state()]

    def _get_published_topics(self, caller_id, subgraph=""):
        topics = self.registry.get_published_topics()
        if subgraph:
            topics = [t for t in topics if t[0].startswith(subgraph)]
        return [1, "published topics", topics]

    def _get_topic_types(self, caller_id):
        return [1, "topic types", self.registry.get_topic_types()]

    def _get_uri(self, caller_id):
        return [1, "", self.uri]

    def _get_pid(self, caller_id):
        return [1, "", os.getpid()]

    # -- parameter server ---------------------------------------------------

    def _set_param(self, caller_id, key, value):
        self.registry.set_param(key, value)
        return [1, f"parameter {key} set", 0]

    def _get_param(self, caller_id, key):
        try:
            return [1, f"parameter {key}", self.registry.get_param(key)]
        except NotFoundError as e:
            return [-1, str(e), 0]

    def _delete_param(self, caller_id, key):
        try:
            self.registry.delete_param(key)
            return [1, f"parameter {key} deleted", 0]
        except NotFoundError as e:
            return [-1, str(e), 0]

    def _has_param(self, caller_id, key):
        return [1, key, self.registry.has_param(key)]

    def _get_param_names(self, caller_id):
        return [1, "parameter names", self.registry.get_param_names()]

    # -- fault injection (test builds only) ---------------------------------

    def _inject_crash(self, caller_id, mode):
        log.warning("crash injection requested: %s", mode)
        if mode == CRASH_IMMEDIATE:
            os._exit(2)
        elif mode == CRASH_DURING_CHECKPOINT:
            if self.writer is None:
                return [-1, "no checkpoint writer to crash", 0]
            self.writer.crash_hook = _exit_at_stage("tmp-written")
            return [1, "armed: next commit dies before rename", 0]
        elif mode == CRASH_BEFORE_NOTIFY:
            self._crash_before_notify = True
            return [1, "armed: next notifying mutation dies before fan-out", 0]
        return [-1, f"unknown crash mode {mode}", 0]

    # -- registry hook -------------------------------------------------------

    def _on_topic_change(self, topic: str, subscriber_uris: list[str],
                         publisher_uris: list[str]) -> None:
        # Runs inside the registry lock: enqueue only, no I/O here.
        if self._crash_before_notify:
            # the mutation must be durable before the simulated crash, or
            # the scenario would be testing checkpoint loss instead
            if self.writer is not None:
                self.writer.wait_idle(5.0)
            os._exit(2)
        for sub in subscriber_uris:
            self.notifier.submit(sub, topic, publisher_uris)


def _exit_at_stage(stage: str):
    def hook(at: str) -> None:
        if at == stage:
            os._exit(2)
    return hook


class _MethodDispatcher:
    """Adapter giving SimpleXMLRPCServer a _dispatch hook."""

    def __init__(self, endpoint: MasterEndpoint):
        self._endpoint = endpoint

    def _dispatch(self, method: str, params):
        return self._endpoint.dispatch(method, list(params))
