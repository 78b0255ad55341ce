"""Document loading and overlapping token-window chunking."""
from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 256
DEFAULT_OVERLAP = 32
TOKENIZER = "unicode-whitespace"

CORPUS_FORMATS = ("one-doc-per-file", "plain-text")

_TOKEN_RE = re.compile(r"\S+")


@dataclass(frozen=True)
class Document:
    doc_id: str
    source_path: str
    text: str
    metadata: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    ordinal: int
    text: str
    token_span: tuple[int, int]

    @property
    def token_count(self) -> int:
        return self.token_span[1] - self.token_span[0]


@dataclass(frozen=True)
class FileRejection:
    path: str
    reason: str


def make_chunk_id(doc_id: str, ordinal: int) -> str:
    return f"{doc_id}#{ordinal:06d}"


def _list_files(root: Path, fmt: str) -> list[Path]:
    files = [
        p
        for p in root.rglob("*")
        if p.is_file() and not any(part.startswith(".") for part in p.relative_to(root).parts)
    ]
    if fmt == "plain-text":
        files = [p for p in files if p.suffix.lower() == ".txt"]
    return sorted(files, key=lambda p: p.relative_to(root).as_posix())


def read_documents(
    source: str | Path | Iterable[str | Path], fmt: str = "one-doc-per-file"
) -> tuple[list[Document], list[FileRejection]]:
    """Read documents without failing on individual bad files.

    ``source`` is either a directory (walked recursively, hidden entries
    skipped) or an explicit list of files. doc_ids are POSIX paths relative to
    the directory, or to the files' common parent for explicit lists.
    ``fmt="plain-text"`` restricts a directory walk to ``*.txt`` files.
    """
    if fmt not in CORPUS_FORMATS:
        raise ConfigError(f"corpus format must be one of {CORPUS_FORMATS}, got {fmt!r}")

    if isinstance(source, (str, Path)):
        root = Path(source)
        if not root.exists():
            raise ConfigError(f"corpus path does not exist: {root}")
        if root.is_dir():
            paths = _list_files(root, fmt)
        else:
            paths, root = [root], root.parent
    else:
        paths = [Path(p) for p in source]
        for p in paths:
            if not p.is_file():
                raise ConfigError(f"corpus path does not exist: {p}")
        parents = [str(p.resolve().parent) for p in paths]
        root = Path(os.path.commonpath(parents)) if parents else Path(".")
        paths = sorted(paths, key=lambda p: p.resolve().relative_to(root.resolve()).as_posix())

    documents: list[Document] = []
    rejected: list[FileRejection] = []
    seen: set[str] = set()
    for path in paths:
        doc_id = path.resolve().relative_to(root.resolve()).as_posix()
        try:
            text = path.read_bytes().decode("utf-8")
        except UnicodeDecodeError as exc:
            rejected.append(FileRejection(str(path), f"not valid UTF-8 ({exc.reason} at byte {exc.start})"))
            continue
        except OSError as exc:
            rejected.append(FileRejection(str(path), f"unreadable: {exc.strerror or exc}"))
            continue
        if not text.strip():
            rejected.append(FileRejection(str(path), "empty or whitespace-only document"))
            continue
        if doc_id in seen:
            rejected.append(FileRejection(str(path), f"duplicate doc_id {doc_id!r}"))
            continue
        seen.add(doc_id)
        documents.append(Document(doc_id=doc_id, source_path=str(path), text=text))
    return documents, rejected


def load_corpus(source: str | Path | Iterable[str | Path], fmt: str = "one-doc-per-file") -> list[Document]:
    """Load a corpus, logging per-file rejections; an empty result is fatal."""
    documents, rejected = read_documents(source, fmt)
    for r in rejected:
        logger.warning("rejected %s: %s", r.path, r.reason)
    if not documents:
        raise DataError("empty corpus: no loadable documents under " + str(source))
    return documents


def validate_chunking(chunk_size: int, overlap: int) -> None:
    if chunk_size < 1:
        raise ConfigError(f"chunking.size must be >= 1, got {chunk_size}")
    if overlap < 0 or overlap >= chunk_size:
        raise ConfigError(
            f"chunking.overlap must satisfy 0 <= overlap < chunking.size ({chunk_size}), got {overlap}"
        )


def chunk_document(
    doc: Document, chunk_size: int = DEFAULT_CHUNK_SIZE, overlap: int = DEFAULT_OVERLAP
) -> list[Chunk]:
    """Split ``doc`` into windows of ``chunk_size`` whitespace tokens.

    Windows start every ``chunk_size - overlap`` tokens and stop once one
    reaches the last token. Chunk text is the verbatim substring from the
    first token's start to the last token's end.
    """
    validate_chunking(chunk_size, overlap)
    tokens = [(m.start(), m.end()) for m in _TOKEN_RE.finditer(doc.text)]
    n = len(tokens)
    stride = chunk_size - overlap
    chunks: list[Chunk] = []
    start = 0
    while start < n:
        end = min(start + chunk_size, n)
        text = doc.text[tokens[start][0] : tokens[end - 1][1]]
        ordinal = len(chunks)
        chunks.append(
            Chunk(
                chunk_id=make_chunk_id(doc.doc_id, ordinal),
                doc_id=doc.doc_id,
                ordinal=ordinal,
                text=text,
                token_span=(start, end),
            )
        )
        if end == n:
            break
        start += stride
    return chunks


def chunk_corpus(
    documents: Iterable[Document], chunk_size: int = DEFAULT_CHUNK_SIZE, overlap: int = DEFAULT_OVERLAP
) -> list[Chunk]:
    chunks: list[Chunk] = []
    for doc in documents:
        chunks.extend(chunk_document(doc, chunk_size, overlap))
    return chunks


def chunking_config(chunk_size: int, overlap: int) -> dict:
    return {"size": chunk_size, "overlap": overlap, "tokenizer": TOKENIZER}
