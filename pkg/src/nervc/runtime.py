"""Process-wide numeric settings: worker thread cap and deterministic mode.

``NERVC_THREADS`` caps worker threads (default: hardware parallelism).
``NERVC_DETERMINISTIC=1`` forces sequential-reduction, single-thread numerics.
Both can be overridden in-process with :func:`configure` or :func:`sequential`.
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager
from typing import Iterator

from threadpoolctl import threadpool_limits

_local = threading.local()
_overrides: dict[str, object] = {}


def _env_flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


def deterministic() -> bool:
    """True when reductions must run in a fixed sequential order."""
    forced = getattr(_local, "deterministic", None)
    if forced is not None:
        return forced
    if "deterministic" in _overrides:
        return bool(_overrides["deterministic"])
    return _env_flag("NERVC_DETERMINISTIC")


def thread_count() -> int:
    if deterministic():
        return 1
    if "threads" in _overrides:
        return int(_overrides["threads"])  # type: ignore[arg-type]
    raw = os.environ.get("NERVC_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def configure(threads: int | None = None, deterministic: bool | None = None) -> None:
    """Override the environment for the current process."""
    if threads is not None:
        _overrides["threads"] = max(1, int(threads))
    if deterministic is not None:
        _overrides["deterministic"] = bool(deterministic)


def reset() -> None:
    _overrides.clear()


@contextmanager
def sequential(enabled: bool = True) -> Iterator[None]:
    """Run the enclosed block in deterministic mode on this thread.

    BLAS is pinned to one thread so every matrix product reduces in a
    fixed order.
    """
    previous = getattr(_local, "deterministic", None)
    _local.deterministic = enabled
    try:
        if enabled:
            with threadpool_limits(limits=1):
                yield
        else:
            yield
    finally:
        _local.deterministic = previous
