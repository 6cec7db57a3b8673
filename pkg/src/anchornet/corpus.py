"""Sentence corpora: ``label<TAB>text`` ingestion, splits, vocabulary, encoding.

Also ships the synthetic planted-trigram corpus used for desk-scale tests:
every sentence is filler words plus one class-specific trigram, so the label
is decided by a single three-token span whose position is known.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, ParseError

UNK, PAD = 0, 1
UNK_TOKEN, PAD_TOKEN = "<unk>", "<pad>"
SPLITS = ("train", "val", "test")


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(documents: Sequence[Sequence[str]]) -> dict[str, int]:
    vocab = {UNK_TOKEN: UNK, PAD_TOKEN: PAD}
    for doc in documents:
        for tok in doc:
            if tok not in vocab:
                vocab[tok] = len(vocab)
    return vocab


@dataclass
class Corpus:
    documents: list[list[str]]
    labels: list[int]
    split: list[str]
    vocab: dict[str, int] = field(default_factory=dict)
    num_classes: int = 2
    seed: int | None = None

    def __post_init__(self):
        if not (len(self.documents) == len(self.labels) == len(self.split)):
            raise InvalidArgument("documents, labels and split must have equal length")
        if any(not 0 <= y < self.num_classes for y in self.labels):
            raise InvalidArgument(f"labels must lie in [0, {self.num_classes})")
        if any(s not in SPLITS for s in self.split):
            raise InvalidArgument(f"split names must be among {SPLITS}")
        if not self.vocab:
            self.vocab = build_vocab(self.subset("train"))

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == split]

    def subset(self, split: str) -> list[list[str]]:
        return [self.documents[i] for i in self.indices(split)]

    def encode_tokens(self, tokens: Sequence[str], seq_len: int) -> np.ndarray:
        """Vocabulary indices, post-padded with PAD or truncated at the tail."""
        ids = [self.vocab.get(t, UNK) for t in tokens[:seq_len]]
        ids += [PAD] * (seq_len - len(ids))
        return np.asarray(ids, dtype=np.int64)

    def encode(self, split: str, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        if not idx:
            return np.zeros((0, seq_len), dtype=np.int64), np.zeros(0, dtype=np.int64)
        tokens = np.stack([self.encode_tokens(self.documents[i], seq_len) for i in idx])
        return tokens, np.asarray([self.labels[i] for i in idx], dtype=np.int64)


def assign_splits(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> list[str]:
    """Deterministic shuffled split; val and test get ``floor(n * fraction)`` each."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = int(n * fractions[1])
    n_test = int(n * fractions[2])
    split = ["train"] * n
    for i in order[:n_val]:
        split[i] = "val"
    for i in order[n_val:n_val + n_test]:
        split[i] = "test"
    return split


def parse_corpus(text: str, seed: int = 0, num_classes: int | None = None) -> Corpus:
    documents, labels, explicit = [], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise ParseError("expected 'label<TAB>text' (optionally '<TAB>split')", lineno)
        try:
            label = int(parts[0])
        except ValueError:
            raise ParseError(f"label {parts[0]!r} is not an integer", lineno) from None
        if label < 0:
            raise ParseError(f"negative label {label}", lineno)
        tokens = tokenize(parts[1])
        if not tokens:
            raise ParseError("empty text", lineno)
        if len(parts) == 3:
            if parts[2].strip() not in SPLITS:
                raise ParseError(f"unknown split {parts[2]!r}", lineno)
            explicit.append(parts[2].strip())
        documents.append(tokens)
        labels.append(label)
    if not documents:
        raise ParseError("corpus is empty")
    if explicit and len(explicit) != len(documents):
        raise ParseError("either every line or no line carries a split column")
    split = explicit or assign_splits(len(documents), seed)
    k = num_classes or max(labels) + 1
    return Corpus(documents, labels, split, num_classes=max(k, 2), seed=seed)


def load_corpus(path: str | Path, seed: int = 0, num_classes: int | None = None) -> Corpus:
    """Read a UTF-8 ``label<TAB>text`` file (an optional third column pins the split).

    Text is lowercased and whitespace-tokenized; the vocabulary comes from
    the train split only, with ``<unk>`` = 0 and ``<pad>`` = 1.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8: {exc}") from None
    return parse_corpus(text, seed, num_classes)


def format_corpus(corpus: Corpus, with_split: bool = True) -> str:
    lines = []
    for doc, y, s in zip(corpus.documents, corpus.labels, corpus.split):
        line = f"{y}\t{' '.join(doc)}"
        lines.append(f"{line}\t{s}" if with_split else line)
    return "\n".join(lines) + "\n"


@dataclass
class PlantedCorpus:
    corpus: Corpus
    trigrams: list[list[tuple[str, str, str]]]
    positions: list[int]

    def planted_span(self, doc_index: int) -> tuple[int, int]:
        return self.positions[doc_index], self.positions[doc_index] + 3


def make_planted_corpus(
    n_train: int = 2000,
    n_val: int = 500,
    n_test: int = 0,
    seed: int = 0,
    num_classes: int = 2,
    n_filler: int = 400,
    trigrams_per_class: int = 4,
    min_len: int = 8,
    max_len: int = 40,
) -> PlantedCorpus:
    """Filler sentences with one label-determining trigram planted at a random offset."""
    rng = np.random.default_rng(seed)
    filler = [f"w{i}" for i in range(n_filler)]
    trigrams = [
        [tuple(f"c{c}t{t}p{p}" for p in range(3)) for t in range(trigrams_per_class)]
        for c in range(num_classes)
    ]
    documents, labels, positions = [], [], []
    for _ in range(n_train + n_val + n_test):
        label = int(rng.integers(num_classes))
        length = int(rng.integers(min_len, max_len + 1))
        words = [filler[i] for i in rng.integers(n_filler, size=length - 3)]
        pos = int(rng.integers(length - 2))
        tri = trigrams[label][int(rng.integers(trigrams_per_class))]
        documents.append(words[:pos] + list(tri) + words[pos:])
        labels.append(label)
        positions.append(pos)
    split = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    corpus = Corpus(documents, labels, split, num_classes=num_classes, seed=seed)
    return PlantedCorpus(corpus, trigrams, positions)
