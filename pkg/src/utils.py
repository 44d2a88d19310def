"""
Utility functions for writing run artifacts and reporting them on the console.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional, Union

import pandas as pd
from rich.console import Console
from rich.table import Table

CSV_FLOAT_FORMAT = "%.17g"


def _report(path: Path, console: Optional[Console]) -> None:
    if console is not None:
        console.print(f"[green]✓[/green] Wrote: {path}")


def ensure_dir(path: Union[str, Path]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_text(
    file_path: Union[str, Path],
    content: str,
    console: Optional[Console] = None,
) -> Path:
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(content)
    _report(path, console)
    return path


def write_json(
    file_path: Union[str, Path],
    data: Any,
    console: Optional[Console] = None,
) -> Path:
    return write_text(
        file_path,
        json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        console=console,
    )


def read_json(file_path: Union[str, Path]) -> Any:
    with open(file_path, encoding="utf-8") as f:
        return json.load(f)


def write_table(
    file_path: Union[str, Path],
    frame: pd.DataFrame,
    console: Optional[Console] = None,
    comment: Optional[str] = None,
) -> Path:
    """CSV with repr-exact floats; `comment` becomes a leading '# ' line."""
    body = frame.to_csv(index=False, lineterminator="\n", float_format=CSV_FLOAT_FORMAT)
    if comment is not None:
        body = f"# {comment}\n" + body
    return write_text(file_path, body, console=console)


def _cell(value: Any) -> str:
    if value is None:
        return "-"
    return f"{value:.4f}" if isinstance(value, float) else str(value)


def render_table(title: str, columns: list[str], rows: list[list[Any]]) -> Table:
    table = Table(title=title, title_style="bold cyan", header_style="bold")
    for column in columns:
        table.add_column(column)
    for row in rows:
        table.add_row(*(_cell(v) for v in row))
    return table
