"""HTTP front over the core pipeline: request/response schemas and the app."""

from .app import create_app

__all__ = ["create_app"]
