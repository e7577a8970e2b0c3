"""HTTP service around the restoration lab: pydantic models plus a FastAPI
app whose sync handlers call the core library in process."""
from .app import create_app

__all__ = ["create_app"]
