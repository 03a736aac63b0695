"""Validation of graph resource names and node endpoint URIs."""
from __future__ import annotations

from urllib.parse import urlsplit


class ValidationError(ValueError):
    """Raised when a caller supplies a malformed name, URI, or value."""


def validate_graph_name(name: object, what: str = "name") -> str:
    """Check a slash-separated graph resource name like ``/talker``.

    Must be non-empty, start with ``/``, contain no whitespace and no
    empty segments (``//`` is forbidden, as is a trailing ``/``).
    """
    if not isinstance(name, str):
        raise ValidationError(f"{what} must be a string, got {type(name).__name__}")
    if not name:
        raise ValidationError(f"{what} is empty")
    if not name.startswith("/"):
        raise ValidationError(f"{what} {name!r} must start with '/'")
    if any(c.isspace() for c in name):
        raise ValidationError(f"{what} {name!r} contains whitespace")
    if any(seg == "" for seg in name[1:].split("/")):
        raise ValidationError(f"{what} {name!r} contains an empty segment")
    return name


def validate_endpoint_uri(uri: object, what: str = "uri") -> str:
    """Check an absolute HTTP URI with explicit host and port."""
    if not isinstance(uri, str):
        raise ValidationError(f"{what} must be a string, got {type(uri).__name__}")
    try:
        parts = urlsplit(uri)
        port = parts.port
    except ValueError as e:
        raise ValidationError(f"{what} {uri!r} is not a valid URI: {e}") from None
    if parts.scheme != "http":
        raise ValidationError(f"{what} {uri!r} must use the http scheme")
    if not parts.hostname:
        raise ValidationError(f"{what} {uri!r} has no host")
    if port is None:
        raise ValidationError(f"{what} {uri!r} has no explicit port")
    return uri


def is_valid_graph_name(name: object) -> bool:
    try:
        validate_graph_name(name)
        return True
    except ValidationError:
        return False


def is_valid_endpoint_uri(uri: object) -> bool:
    try:
        validate_endpoint_uri(uri)
        return True
    except ValidationError:
        return False
