"""
Utility functions for the MVLT toolkit.

Logging setup, step progress, deterministic JSON output and small helpers shared by
the data, training and evaluation modules.
"""

import hashlib
import itertools
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Union

from .errors import StorageError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def setup_logging(level: str = "INFO", format_string: Optional[str] = None,
                  run_name: Optional[str] = None, log_dir: str = "./logs") -> None:
    """
    Route log records to stdout and, for a named run, to a timestamped file.

    Args:
        level: Level name; unknown names fall back to INFO
        format_string: Record format, LOG_FORMAT when omitted
        run_name: Command name used in the log file name
        log_dir: Directory receiving ``mvlt_<run>_<timestamp>.log``
    """
    fmt = format_string or LOG_FORMAT
    numeric_level = getattr(logging, level.upper(), logging.INFO)
    if not isinstance(numeric_level, int):
        numeric_level = logging.INFO

    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if run_name:
        os.makedirs(log_dir, exist_ok=True)
        stamp = datetime.now().strftime('%Y%m%d_%H%M%S')
        run_file = logging.FileHandler(os.path.join(log_dir, f"mvlt_{run_name}_{stamp}.log"), encoding='utf-8')
        run_file.setLevel(numeric_level)
        run_file.setFormatter(logging.Formatter(fmt, datefmt=LOG_DATE_FORMAT))
        handlers.append(run_file)

    # force=True replaces handlers left by an earlier command in the same process
    logging.basicConfig(level=numeric_level, format=fmt, datefmt=LOG_DATE_FORMAT,
                        handlers=handlers, force=True)

    # Pillow logs every decoder plugin it loads at DEBUG
    logging.getLogger('PIL').setLevel(logging.WARNING)


class ProgressTracker:
    """
    Throttled progress logging for step loops.

    Counts finished units (training steps, rendered samples, checked parameters) and logs
    at most once per ``update_interval`` seconds. A short ``note`` such as the latest loss
    can ride along with each line.
    """

    def __init__(self, total: Optional[int] = None, description: str = "Processing"):
        self.total = total
        self.description = description
        self.current = 0
        self.note: Optional[str] = None
        self.start_time = time.time()
        self.last_update = 0.0
        self.update_interval = 1.0

        self.logger = logging.getLogger(__name__)

    def update(self, increment: int = 1, note: Optional[str] = None) -> None:
        """Count ``increment`` more units and log if the interval has passed."""
        self.current += increment
        if note is not None:
            self.note = note
        now = time.time()
        if now - self.last_update >= self.update_interval:
            self.logger.info(self._status_line())
            self.last_update = now

    def set_total(self, total: int) -> None:
        """Set or update the total count."""
        self.total = total

    @property
    def elapsed(self) -> float:
        return time.time() - self.start_time

    @property
    def rate(self) -> float:
        elapsed = self.elapsed
        return self.current / elapsed if elapsed > 0 else 0.0

    def _status_line(self) -> str:
        if self.total:
            line = f"{self.description}: {self.current}/{self.total} ({100.0 * self.current / self.total:.1f}%)"
            remaining = self.total - self.current
            if self.rate > 0 and remaining > 0:
                line += f", ETA: {self._format_duration(remaining / self.rate)}"
        else:
            line = f"{self.description}: {self.current} done ({self.rate:.1f}/sec)"
        if self.note:
            line += f" [{self.note}]"
        return line

    def finish(self) -> None:
        """Log the final count, elapsed time and throughput."""
        self.logger.info(f"{self.description} finished: {self.current} in "
                         f"{self._format_duration(self.elapsed)} ({self.rate:.2f}/sec)")

    @staticmethod
    def _format_duration(seconds: float) -> str:
        for limit, unit, scale in ((60, "s", 1), (3600, "m", 60)):
            if seconds < limit:
                return f"{seconds / scale:.1f}{unit}"
        return f"{seconds / 3600:.1f}h"


@contextmanager
def error_context(operation: str, logger: Optional[logging.Logger] = None) -> Iterator[None]:
    """Log start, completion or failure of ``operation``; failures are re-raised."""
    log = logger or logging.getLogger(__name__)
    log.debug(f"Starting: {operation}")
    try:
        yield
    except Exception as e:
        log.error(f"Failed: {operation} - {e}")
        raise
    log.debug(f"Completed: {operation}")


def canonical_json(data: Any) -> str:
    """Sorted-key JSON; equal data always gives equal text."""
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def stable_hash(data: Any, length: int = 16) -> str:
    """Leading hex digits of the SHA-256 of the compact canonical JSON."""
    text = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


def write_json(path: Union[str, Path], data: Any) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(canonical_json(data))
    except OSError as e:
        raise StorageError(f"cannot write JSON: {e}", str(path)) from e
    return path


def append_jsonl(path: Union[str, Path], record: Dict[str, Any]) -> None:
    """Append one compact JSON object per line."""
    try:
        with open(path, "a", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(record, sort_keys=False) + "\n")
    except OSError as e:
        raise StorageError(f"cannot append to log: {e}", str(path)) from e


def format_file_size(size_bytes: int) -> str:
    """Binary-prefixed size, e.g. ``1.5 KB`` for 1536."""
    if size_bytes <= 0:
        return "0 B"
    units = ('B', 'KB', 'MB', 'GB', 'TB')
    exponent = min((size_bytes.bit_length() - 1) // 10, len(units) - 1)
    return f"{size_bytes / 1024 ** exponent:.1f} {units[exponent]}"


def iter_batches(items: Iterable[Any], batch_size: int) -> Iterator[List[Any]]:
    """Consecutive lists of ``batch_size`` items; the last one may be shorter."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be at least 1, got {batch_size}")
    source = iter(items)
    while True:
        batch = list(itertools.islice(source, batch_size))
        if not batch:
            return
        yield batch
