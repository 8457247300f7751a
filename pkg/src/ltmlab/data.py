"""Corpus ingestion: tokenization, vocabulary, splits, and hashing.

Text is consumed as-is (UTF-8, no Unicode normalization). Character
level splits on Unicode scalar values; word level splits lines on ASCII
whitespace and marks each newline with an ``<eos>`` token, the usual
convention for pre-tokenized LM corpora. The vocabulary is always built
from the training split alone; unseen tokens in other splits map to
``<unk>``.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNK = "<unk>"
EOS = "<eos>"

LEVELS = ("char", "word")

DEFAULT_SPLIT_FILES = ("train.txt", "valid.txt", "test.txt")


class CorpusError(ValueError):
    pass


@dataclass
class Vocab:
    token_of: list[str]
    id_of: dict[str, int]
    unk_id: int
    level: str

    @property
    def size(self) -> int:
        return len(self.token_of)


@dataclass
class Corpus:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    vocab: Vocab
    source: str
    content_hash: str

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def tokenize(text: str, level: str) -> list[str]:
    if level == "char":
        return list(text)
    if level == "word":
        toks: list[str] = []
        lines = text.split("\n")
        for i, line in enumerate(lines):
            toks.extend(line.split())
            if i < len(lines) - 1:
                toks.append(EOS)
        return toks
    raise ValueError(f"level must be one of {LEVELS}, got {level!r}")


def build_vocab(text: str, level: str, max_size: int | None = None) -> Vocab:
    """Frequency-ranked vocabulary with a reserved unk slot at id 0.

    Tokens are ordered by descending count, ties broken lexicographically.
    With max_size, the most frequent max_size - 1 tokens are kept and the
    rest fold into unk. A literal <unk> in the text occupies the reserved
    slot rather than a ranked one.
    """
    if not text:
        raise CorpusError("cannot build a vocabulary from empty text")
    if max_size is not None and max_size < 2:
        raise CorpusError("max_size must allow at least one token plus unk")
    counts = Counter(t for t in tokenize(text, level) if t != UNK)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        ranked = ranked[: max_size - 1]
    token_of = [UNK] + [t for t, _ in ranked]
    id_of = {t: i for i, t in enumerate(token_of)}
    return Vocab(token_of=token_of, id_of=id_of, unk_id=0, level=level)


def encode(text: str, vocab: Vocab) -> np.ndarray:
    ids = [vocab.id_of.get(t, vocab.unk_id) for t in tokenize(text, vocab.level)]
    return np.asarray(ids, dtype=np.int64)


def decode(ids, vocab: Vocab) -> str:
    toks = []
    for i in np.asarray(ids, dtype=np.int64):
        if i < 0 or i >= vocab.size:
            raise ValueError(f"id {int(i)} outside vocabulary of size {vocab.size}")
        toks.append(vocab.token_of[i])
    sep = "" if vocab.level == "char" else " "
    return sep.join(toks)


def _read_text(path: Path) -> tuple[str, bytes]:
    if not path.is_file():
        raise FileNotFoundError(f"corpus file missing: {path}")
    raw = path.read_bytes()
    try:
        return raw.decode("utf-8"), raw
    except UnicodeDecodeError as e:
        raise CorpusError(
            f"{path}: invalid UTF-8 at byte offset {e.start}") from None


def load_corpus(dir_path, level: str, cap: int | None = None,
                names: tuple[str, str, str] = DEFAULT_SPLIT_FILES) -> Corpus:
    """Load train/valid/test files, build the vocab from train only."""
    base = Path(dir_path)
    texts = []
    hasher = hashlib.sha256()
    for name in names:
        text, raw = _read_text(base / name)
        texts.append(text)
        hasher.update(name.encode("utf-8"))
        hasher.update(len(raw).to_bytes(8, "little"))
        hasher.update(raw)
    vocab = build_vocab(texts[0], level, cap)
    train, valid, test = (encode(t, vocab) for t in texts)
    return Corpus(train=train, valid=valid, test=test, vocab=vocab,
                  source=str(base), content_hash=hasher.hexdigest())


def desk_corpus_dir() -> Path:
    """Directory of the bundled small corpus used for quick runs and tests."""
    return Path(__file__).resolve().parent / "corpora" / "desk"
