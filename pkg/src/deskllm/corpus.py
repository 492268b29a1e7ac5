"""Plain-text corpora that need no download.

``stdlib_documents`` harvests the English prose that ships with every CPython
install: the pydoc topic pages and the docstrings of the standard library.
``package_documents`` does the same for installed third-party packages.
Extraction is deterministic for a given set of installed versions.
"""

from __future__ import annotations

import ast
import hashlib
import importlib.util
import sysconfig
import warnings
from importlib import resources
from pathlib import Path
from typing import Iterator

SKIP_DIRS = {"test", "tests", "idlelib", "lib2to3", "site-packages", "dist-packages",
             "ensurepip", "turtledemo", "__pycache__", "config-3"}


def _module_docstrings(path: Path) -> str:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            tree = ast.parse(path.read_text(encoding="utf-8"))
    except (SyntaxError, UnicodeDecodeError, ValueError):
        return ""
    parts = []
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
            doc = ast.get_docstring(node, clean=True)
            if doc and len(doc) >= 40:
                parts.append(doc)
    return "\n\n".join(parts)


def stdlib_documents(min_chars: int = 200) -> Iterator[str]:
    """Yield pydoc topic pages, then one document per stdlib module (its docstrings joined)."""
    try:
        from pydoc_data.topics import topics
    except ImportError:  # stripped-down interpreters
        topics = {}
    for key in sorted(topics):
        text = topics[key].strip()
        if len(text) >= min_chars:
            yield text
    yield from _tree_documents(Path(sysconfig.get_paths()["stdlib"]), min_chars)


def _tree_documents(root: Path, min_chars: int) -> Iterator[str]:
    for path in sorted(root.rglob("*.py")):
        rel = path.relative_to(root).parts
        if any(p in SKIP_DIRS or p.startswith("config-") for p in rel[:-1]):
            continue
        text = _module_docstrings(path)
        if len(text) >= min_chars:
            yield text


DEFAULT_PACKAGES = ("numpy", "scipy")


def package_documents(packages=DEFAULT_PACKAGES, min_chars: int = 200) -> Iterator[str]:
    """One document per module of each installed package; missing packages are skipped."""
    for name in packages:
        spec = importlib.util.find_spec(name)
        if spec is None or not spec.submodule_search_locations:
            continue
        for loc in sorted(spec.submodule_search_locations):
            yield from _tree_documents(Path(loc), min_chars)


def local_documents(packages=DEFAULT_PACKAGES) -> Iterator[str]:
    yield from stdlib_documents()
    yield from package_documents(packages)


def is_heldout(doc: str, every: int = 20) -> bool:
    """Stable train/eval split keyed on document content."""
    h = int.from_bytes(hashlib.sha1(doc.encode("utf-8")).digest()[:4], "little")
    return h % every == 0


def split_documents(docs, every: int = 20) -> tuple[list[str], list[str]]:
    train, held = [], []
    for d in docs:
        (held if is_heldout(d, every) else train).append(d)
    return train, held


def toy_corpus_path() -> Path:
    return Path(str(resources.files("deskllm") / "data" / "toy_corpus.txt"))


def toy_config_path() -> Path:
    return Path(str(resources.files("deskllm") / "data" / "toy_config.json"))


DOC_SEPARATOR = "<|endoftext|>"


def read_documents(path: str | Path) -> list[str]:
    """Documents of a text file, split on literal ``<|endoftext|>`` lines if present."""
    text = Path(path).read_text(encoding="utf-8")
    return [d.strip("\n") for d in text.split(DOC_SEPARATOR) if d.strip()]


def write_documents(docs, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"\n{DOC_SEPARATOR}\n".join(docs))
        fh.write("\n")
