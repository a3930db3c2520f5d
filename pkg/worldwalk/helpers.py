from __future__ import annotations

import csv
import logging
import re
import sys
from collections import defaultdict
from datetime import datetime
from typing import TYPE_CHECKING, TypeVar

from rapidfuzz.fuzz import partial_ratio_alignment
from rich.logging import RichHandler

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Mapping, Sequence
    from pathlib import Path
    from types import TracebackType

_logger = logging.getLogger('worldwalk.helpers')

_T = TypeVar('_T')

_ANSI_ESCAPE = re.compile(r'\x1b\[[0-9;]*m')


def search_for(
    query: str,
    objects: Sequence[_T],
    *,
    key: Callable[[_T], str] | None = None,
    threshold: float = 80,
    max_results: int | None = 25,
) -> list[_T]:
    """Fuzzy search ranking objects by partial-ratio score, then by how early the best alignment starts.

    :param query: The string to search for.
    :param objects: The sequence of strings, or other objects if using a key, to search through.
    :param key: Optional function mapping each object to the string that is searched.
    :param threshold: Similarity cutoff between 0 and 100 inclusive.
    :param max_results: Maximum number of results, or ``None`` for all results above the threshold.
    :return: Objects passing the threshold, most relevant first.
    """
    if not query:
        return list(objects[:max_results])

    query = query.strip().lower()
    scored: defaultdict[tuple[float, int], list[_T]] = defaultdict(list)
    strings = objects if key is None else map(key, objects)

    for i, string in enumerate(strings):
        alignment = partial_ratio_alignment(query, string.lower())
        scored[(alignment.score, -alignment.dest_start)].append(objects[i])

    results: list[_T] = []
    for score, objs in sorted(scored.items(), key=lambda item: item[0], reverse=True):
        if score[0] < threshold:
            break
        results.extend(objs)
    return results[:max_results]


def did_you_mean(query: str, candidates: Iterable[str]) -> str:
    """Return a ``" (did you mean 'x'?)"`` suffix for error messages, or an empty string."""
    matches = search_for(query, sorted(candidates), threshold=60, max_results=1)
    return f" (did you mean '{matches[0]}'?)" if matches else ''


class IndentFormatter(logging.Formatter):
    """Wraps another formatter so that continuation lines line up under the first line's message column."""

    def __init__(self, to_wrap: logging.Formatter | None = None) -> None:
        super().__init__()
        self._wrapped = to_wrap or logging.Formatter()

    def prefix_length(self, record: logging.LogRecord) -> int:
        blank = logging.LogRecord(
            name=record.name,
            level=record.levelno,
            pathname=record.pathname,
            lineno=record.lineno,
            msg='',
            args=(),
            exc_info=None,
        )
        last_line = self._wrapped.format(blank).splitlines()[-1]
        return len(_ANSI_ESCAPE.sub('', last_line))

    def format(self, record: logging.LogRecord) -> str:
        indent = ' ' * self.prefix_length(record)
        first, *rest = self._wrapped.format(record).splitlines(keepends=True)
        return first + ''.join(indent + line for line in rest)


def rotate_latest_log(logs_dir: Path, name: str = 'worldwalk_latest.log') -> Path:
    """Rename an existing latest log to ``<date>.<n>.log`` and return the path for the new latest log."""
    log_file = logs_dir / name
    if log_file.is_file():
        with log_file.open(encoding='utf-8') as file:
            timestamp = file.read(10)
        try:
            datetime.strptime(timestamp, '%Y-%m-%d')  # noqa: DTZ007
        except ValueError:
            timestamp = '0000-00-00'
        log_number = 1
        while (rename_path := logs_dir / f'{timestamp}.{log_number}.log').is_file():
            log_number += 1
        log_file.rename(rename_path)
    return log_file


def setup_logging(logs_dir: Path | None = None, *, debug: bool = False) -> None:
    root = logging.getLogger()
    for handler in root.handlers:
        handler.close()
    root.handlers.clear()
    root.setLevel(logging.DEBUG if debug else logging.INFO)

    console = RichHandler(show_path=False, rich_tracebacks=True, markup=False)
    console.setFormatter(logging.Formatter('{message}', style='{'))
    root.addHandler(console)

    if logs_dir is not None:
        logs_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(rotate_latest_log(logs_dir), 'w', encoding='utf-8')
        file_handler.setFormatter(IndentFormatter(logging.Formatter(
            fmt='{asctime} [{levelname}] {name}: {message}',
            datefmt='%Y-%m-%d %H:%M:%S',
            style='{',
        )))
        root.addHandler(file_handler)

    def handle_exception(exc_type: type[BaseException], value: BaseException, traceback: TracebackType) -> None:
        _logger.critical(f'Uncaught {exc_type.__name__}: {value}', exc_info=(exc_type, value, traceback))
    sys.excepthook = handle_exception

    if debug:
        _logger.debug('Debug mode enabled')


def format_value(value: object) -> str:
    # repr round-trips float64 exactly, which keeps CSV outputs byte-identical across reruns
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Mapping[str, object] | Sequence[object]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8', newline='') as file:
        writer = csv.writer(file, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            values = [row[column] for column in header] if isinstance(row, dict) else list(row)
            writer.writerow([format_value(value) for value in values])
    _logger.debug(f'Wrote {path.as_posix()}')
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    with path.open(encoding='utf-8', newline='') as file:
        return list(csv.DictReader(file))
