"""Outbound XML-RPC calls to masters and node endpoints, with timeouts."""
from __future__ import annotations

import xmlrpc.client


class _TimeoutTransport(xmlrpc.client.Transport):
    def __init__(self, timeout_s: float):
        super().__init__()
        self._timeout_s = timeout_s

    def make_connection(self, host):
        conn = super().make_connection(host)
        conn.timeout = self._timeout_s
        return conn


def proxy(uri: str, timeout_s: float = 5.0) -> xmlrpc.client.ServerProxy:
    """One-shot XML-RPC proxy with a connect/read timeout."""
    return xmlrpc.client.ServerProxy(uri, transport=_TimeoutTransport(timeout_s))


def ping_node(api_uri: str, timeout_ms: float = 200.0) -> bool:
    """True iff the endpoint answers getPid with a success triple in time."""
    try:
        code, _, _ = proxy(api_uri, timeout_ms / 1000.0).getPid("/master")
        return code == 1
    except Exception:
        return False


def notify_publisher_update(
    subscriber_api: str, topic: str, publisher_uris: list[str],
    timeout_s: float = 0.5,
) -> bool:
    """Deliver a publisherUpdate callback; best-effort, never raises."""
    try:
        proxy(subscriber_api, timeout_s).publisherUpdate(
            "/master", topic, list(publisher_uris)
        )
        return True
    except Exception:
        return False
