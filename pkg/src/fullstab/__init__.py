"""Full-frame video stabilization with deterministic solvers."""
from __future__ import annotations

__version__ = "0.1.0"
