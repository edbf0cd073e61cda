"""Thread-safe in-memory store for per-instance results."""

import threading
import time
from collections import deque
from typing import Any, Dict, Hashable, List, Optional, Tuple


class ResultStore:
    """Thread-safe fan-in point for worker results.

    Workers add records under a sortable key; readers take snapshots sorted
    by key, so the merge order never depends on thread scheduling.
    All public methods are thread-safe.
    """

    def __init__(self, max_errors: int = 100):
        """Initialize the result store.

        Args:
            max_errors: Maximum number of worker errors to keep.
        """
        self._lock = threading.Lock()

        self.records: Dict[Hashable, Dict[str, Any]] = {}
        self.errors: deque = deque(maxlen=max_errors)

        self.started: float = time.time()
        self.last_update: Optional[float] = None

    def add_result(self, key: Hashable, record: Dict[str, Any]) -> None:
        """Store one result record.

        Args:
            key: Sortable key (e.g. (axis index, instance, scheme)).
            record: Plain-dict result; later records under the same key replace earlier ones.
        """
        with self._lock:
            self.records[key] = record
            self.last_update = time.time()

    def add_error(self, key: Hashable, error: BaseException) -> None:
        """Remember a worker failure so the coordinator can re-raise it."""
        with self._lock:
            self.errors.append((key, error))
            self.last_update = time.time()

    def first_error(self) -> Optional[Tuple[Hashable, BaseException]]:
        """Earliest-keyed worker failure, if any."""
        with self._lock:
            if not self.errors:
                return None
            return min(self.errors, key=lambda item: item[0])

    def snapshot(self) -> Dict[str, Any]:
        """Get a thread-safe snapshot of collected results.

        Returns:
            Dictionary with records sorted by key as (key, record) pairs.
        """
        with self._lock:
            items: List[Tuple[Hashable, Dict[str, Any]]] = sorted(self.records.items(), key=lambda kv: kv[0])
            return {
                'records': [(key, dict(record)) for key, record in items],
                'count': len(items),
                'errors': len(self.errors),
                'elapsed': time.time() - self.started,
                'last_update': self.last_update,
            }

    def clear(self) -> None:
        """Clear all stored data (useful for testing)."""
        with self._lock:
            self.records.clear()
            self.errors.clear()
            self.started = time.time()
            self.last_update = None
