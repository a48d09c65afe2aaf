"""HTTP service wrapping the core pipeline."""

from . import schemas  # noqa: F401

__all__ = ["schemas", "create_app"]


def create_app():
    """Deferred import so importing schemas alone stays cheap."""
    from .app import create_app as _create

    return _create()
