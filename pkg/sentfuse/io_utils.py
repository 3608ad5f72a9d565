"""Line-oriented text IO shared by the corpus readers and the CLI."""
import contextlib
import io
import os
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, TextIO, Union

TextSource = Union[str, os.PathLike, TextIO]


def _position(stream: TextIO) -> Optional[int]:
    try:
        return stream.tell() if stream.seekable() else None
    except (OSError, io.UnsupportedOperation):
        return None


@contextlib.contextmanager
def open_text_source(source: TextSource) -> Iterator[TextIO]:
    """Yield a UTF-8 text stream for a path, or an open stream rewound to its start.

    A stream is handed back at the position the caller left it.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8") as handle:
            yield handle
        return
    if not hasattr(source, "read"):
        raise TypeError(f"text source must be a path or a readable text stream, got {type(source).__name__}")

    start = _position(source)
    if start is not None:
        source.seek(0)
    try:
        yield source
    finally:
        if start is not None:
            source.seek(start)


def read_lines(source: TextSource) -> List[str]:
    """All lines of a text source with trailing newlines removed."""
    with open_text_source(source) as handle:
        return [line.rstrip("\r\n") for line in handle]


def write_lines(path: Union[str, os.PathLike], lines: Iterable[str]) -> None:
    """One line per item, newline-terminated; parent directories are created."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8", newline="\n") as handle:
        handle.writelines(f"{line}\n" for line in lines)
