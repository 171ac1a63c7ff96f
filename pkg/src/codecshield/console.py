"""Shared Rich console, logging setup, and table helpers."""

from __future__ import annotations

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator

from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

console = Console(stderr=True)

STYLE = {
    "accent": "magenta",
    "accent_alt": "bright_cyan",
    "success": "green",
    "warning": "yellow",
    "error": "red",
}

LOGGER_NAME = "codecshield"
_FILE_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(f"{LOGGER_NAME}.{name}")


def setup_logging(verbose: bool = False) -> None:
    root = logging.getLogger(LOGGER_NAME)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    if not any(isinstance(h, RichHandler) for h in root.handlers):
        handler = RichHandler(console=console, show_path=False, markup=False)
        handler.setFormatter(logging.Formatter("%(message)s"))
        root.addHandler(handler)


@contextmanager
def stage_log(path: Path) -> Iterator[None]:
    """Mirror package logging into a plain-text file while the block runs."""
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter(_FILE_FORMAT))
    root = logging.getLogger(LOGGER_NAME)
    root.addHandler(handler)
    try:
        yield
    finally:
        root.removeHandler(handler)
        handler.close()


def simple_table(headers: Iterable[str], header_style: str = "bold cyan", title: str | None = None) -> Table:
    table = Table(expand=True, row_styles=("", "dim"), title=title)
    for header in headers:
        table.add_column(header, header_style=header_style, overflow="fold")
    return table


def progress_bar() -> Progress:
    return Progress(
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        console=console,
        transient=True,
    )
