"""Uncased text normalization, WordPiece tokenization and fixed-length input encoding."""

from __future__ import annotations

import hashlib
import os
import re
import unicodedata
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .archive import read_archive, write_archive

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
MAX_WORD_CHARS = 100
DEID_WORD = "deid"

_DEID_SPAN = re.compile(r"\[\*\*.*?\*\*\]", re.DOTALL)


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    index: dict[str, int]

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocabulary":
        tokens = tuple(tokens)
        seen: dict[str, int] = {}
        for line, token in enumerate(tokens, start=1):
            if not token:
                raise VocabularyError(f"empty token on line {line}")
            if token in seen:
                raise VocabularyError(
                    f"duplicate token {token!r} on lines {seen[token]} and {line}"
                )
            seen[token] = line
        for special in SPECIAL_TOKENS:
            if special not in seen:
                raise VocabularyError(f"vocabulary lacks special token {special}")
        return cls(tokens, {tok: i for i, tok in enumerate(tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


def load_vocabulary(path: str | os.PathLike) -> Vocabulary:
    """One token per line; the id of a token is its zero-based line index."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return Vocabulary.from_tokens(line.rstrip("\r") for line in lines)


def desk_vocabulary_path() -> Path:
    """The bundled 200-token vocabulary covering the synthetic corpus lexicon."""
    return Path(str(resources.files("icdbert") / "data" / "desk_vocab.txt"))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def _is_whitespace(char: str) -> bool:
    if char in " \t\n\r":
        return True
    return unicodedata.category(char) == "Zs"


def _is_control(char: str) -> bool:
    if char in "\t\n\r":
        return False
    return unicodedata.category(char) in ("Cc", "Cf")


def _is_punctuation(char: str) -> bool:
    cp = ord(char)
    # ASCII symbols such as "$" or "^" are not Unicode punctuation but are split anyway.
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(char).startswith("P")


def _strip_accents(text: str) -> str:
    return "".join(c for c in unicodedata.normalize("NFD", text) if unicodedata.category(c) != "Mn")


def normalize(text: str) -> list[str]:
    """Lowercase, strip accents, replace de-id spans, and split into words and punctuation.

    >>> normalize("Chest X-Ray: clear.")
    ['chest', 'x', '-', 'ray', ':', 'clear', '.']
    """
    text = _DEID_SPAN.sub(f" {DEID_WORD} ", text)
    cleaned = []
    for char in text:
        if char == "\ufffd" or _is_control(char):
            continue
        cleaned.append(" " if _is_whitespace(char) else char)
    text = _strip_accents("".join(cleaned).lower())
    words: list[str] = []
    for chunk in text.split():
        current = []
        for char in chunk:
            if _is_punctuation(char):
                if current:
                    words.append("".join(current))
                    current = []
                words.append(char)
            else:
                current.append(char)
        if current:
            words.append("".join(current))
    return words


# ---------------------------------------------------------------------------
# WordPiece
# ---------------------------------------------------------------------------

def wordpiece_tokenize(
    word: str, vocab: Vocabulary, max_chars: int = MAX_WORD_CHARS
) -> list[str]:
    """Greedy longest-match-first segmentation; any dead end yields ``[UNK]``."""
    if len(word) > max_chars:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            candidate = word[start:end]
            if start > 0:
                candidate = "##" + candidate
            if candidate in vocab.index:
                match = candidate
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocabulary) -> list[str]:
    return [piece for word in normalize(text) for piece in wordpiece_tokenize(word, vocab)]


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncodedExample:
    input_ids: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray
    labels: np.ndarray


def encode_example(
    text: str, labels: Sequence[int], vocab: Vocabulary, max_len: int = 512
) -> EncodedExample:
    """``[CLS] + pieces[:max_len - 2] + [SEP]``, right-padded with ``[PAD]``."""
    if max_len < 3:
        raise ValueError("max_len must be at least 3")
    pieces = tokenize(text, vocab)[: max_len - 2]
    ids = [vocab.cls_id] + [vocab.index[p] for p in pieces] + [vocab.sep_id]
    n_real = len(ids)
    input_ids = np.full(max_len, vocab.pad_id, dtype=np.int32)
    input_ids[:n_real] = ids
    attention_mask = np.zeros(max_len, dtype=np.int8)
    attention_mask[:n_real] = 1
    return EncodedExample(
        input_ids=input_ids,
        attention_mask=attention_mask,
        segment_ids=np.zeros(max_len, dtype=np.int8),
        labels=np.asarray(labels, dtype=np.int8),
    )


def decode_tokens(ids: Iterable[int], vocab: Vocabulary) -> list[str]:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise IndexError(f"token id {i} outside vocabulary of size {len(vocab)}")
        if i != vocab.pad_id:
            out.append(vocab.tokens[i])
    return out


@dataclass
class EncodedDataset:
    """Stacked encodings: ``input_ids``/``attention_mask``/``segment_ids`` are
    ``(n, max_len)``, ``labels`` is ``(n, n_labels)``."""

    input_ids: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray
    labels: np.ndarray
    admission_ids: np.ndarray
    label_names: list[str]

    def __len__(self) -> int:
        return len(self.input_ids)

    @property
    def max_len(self) -> int:
        return self.input_ids.shape[1]

    def subset(self, index: np.ndarray) -> "EncodedDataset":
        return EncodedDataset(
            self.input_ids[index],
            self.attention_mask[index],
            self.segment_ids[index],
            self.labels[index],
            self.admission_ids[index],
            self.label_names,
        )


def encode_dataset(
    rows: Sequence, vocab: Vocabulary, max_len: int, label_names: Sequence[str]
) -> EncodedDataset:
    """Encode :class:`~icdbert.labels.LabeledNote`-like rows (``admission_id``, ``text``, ``labels``)."""
    n_labels = len(label_names)
    n = len(rows)
    input_ids = np.zeros((n, max_len), dtype=np.int32)
    attention_mask = np.zeros((n, max_len), dtype=np.int8)
    segment_ids = np.zeros((n, max_len), dtype=np.int8)
    labels = np.zeros((n, n_labels), dtype=np.int8)
    admission_ids = np.zeros(n, dtype=np.int64)
    for i, row in enumerate(rows):
        example = encode_example(row.text, row.labels, vocab, max_len)
        if len(example.labels) != n_labels:
            raise ValueError(f"row {i}: {len(example.labels)} labels, expected {n_labels}")
        input_ids[i] = example.input_ids
        attention_mask[i] = example.attention_mask
        segment_ids[i] = example.segment_ids
        labels[i] = example.labels
        admission_ids[i] = row.admission_id
    return EncodedDataset(input_ids, attention_mask, segment_ids, labels, admission_ids, list(label_names))


TOKEN_CACHE_KIND = "tokenized-dataset"


def save_encoded(path: str | os.PathLike, data: EncodedDataset, vocab: Vocabulary) -> None:
    write_archive(
        path,
        TOKEN_CACHE_KIND,
        {
            "input_ids": data.input_ids,
            "attention_mask": data.attention_mask,
            "segment_ids": data.segment_ids,
            "labels": data.labels,
            "admission_ids": data.admission_ids,
        },
        meta={
            "max_len": data.max_len,
            "label_names": data.label_names,
            "vocab_size": len(vocab),
            "vocab_sha256": vocab.fingerprint(),
        },
    )


def load_encoded(path: str | os.PathLike) -> tuple[EncodedDataset, dict]:
    tensors, meta = read_archive(path, kind=TOKEN_CACHE_KIND)
    data = EncodedDataset(
        tensors["input_ids"],
        tensors["attention_mask"],
        tensors["segment_ids"],
        tensors["labels"],
        tensors["admission_ids"],
        list(meta["label_names"]),
    )
    return data, meta
