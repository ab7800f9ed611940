"""Session log ingestion, vocabulary, sequence cleaning and prefix augmentation."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAX_SEQUENCE_LENGTH = 20
MIN_FREQUENCY = 10
MAX_MALFORMED_FRACTION = 0.10


class CorpusError(ValueError):
    """The corpus cannot be used (too many bad lines, nothing survives filtering)."""


@dataclass
class SessionRecord:
    session_id: str
    items: list[int]
    categories: list[str] | None = None
    timestamps: list[int] | None = None

    def __post_init__(self) -> None:
        if not self.items:
            raise ValueError(f"session {self.session_id!r} has no items")
        n = len(self.items)
        for label, seq in (("cats", self.categories), ("ts", self.timestamps)):
            if seq is not None and len(seq) != n:
                raise ValueError(f"session {self.session_id!r}: {label} length {len(seq)} != items length {n}")
        if self.timestamps is not None:
            order = sorted(range(n), key=lambda i: self.timestamps[i])
            if order != list(range(n)):
                self.items = [self.items[i] for i in order]
                self.timestamps = [self.timestamps[i] for i in order]
                if self.categories is not None:
                    self.categories = [self.categories[i] for i in order]


@dataclass
class TrainingSequence:
    inputs: list[int]
    target: int

    def __post_init__(self) -> None:
        if not 1 <= len(self.inputs) < MAX_SEQUENCE_LENGTH:
            raise ValueError(f"inputs length {len(self.inputs)} outside [1, {MAX_SEQUENCE_LENGTH - 1}]")


@dataclass
class ParseReport:
    lines: int = 0
    records: int = 0
    skipped: int = 0


def _record_from_json(obj) -> SessionRecord:
    if not isinstance(obj, dict):
        raise ValueError("line is not a JSON object")
    items = obj["items"]
    if not isinstance(items, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in items):
        raise ValueError("items must be a list of integers")
    cats = obj.get("cats")
    ts = obj.get("ts")
    return SessionRecord(
        session_id=str(obj.get("sid", "")),
        items=list(items),
        categories=[str(c) for c in cats] if cats is not None else None,
        timestamps=[int(t) for t in ts] if ts is not None else None,
    )


def parse_sessions(path: str | Path, report: ParseReport | None = None) -> Iterator[SessionRecord]:
    """Yield sessions from a JSON-lines file in file order.

    Malformed lines are skipped and tallied in ``report``.  Once the file is
    exhausted, a :class:`CorpusError` is raised if more than 10% of the non-blank
    lines were malformed.
    """
    report = report if report is not None else ParseReport()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            report.lines += 1
            try:
                rec = _record_from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                report.skipped += 1
                log.debug("skipping line %d of %s: %s", lineno, path, exc)
                continue
            report.records += 1
            yield rec
    if report.skipped:
        log.info("%s: skipped %d of %d lines", path, report.skipped, report.lines)
    if report.lines and report.skipped / report.lines > MAX_MALFORMED_FRACTION:
        raise CorpusError(f"{path}: {report.skipped} of {report.lines} lines malformed")


def write_sessions(path: str | Path, sessions: Iterable[SessionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            obj: dict = {"sid": s.session_id, "items": list(s.items)}
            if s.categories is not None:
                obj["cats"] = list(s.categories)
            if s.timestamps is not None:
                obj["ts"] = list(s.timestamps)
            fh.write(json.dumps(obj) + "\n")


class Vocabulary:
    """Bijective raw-id <-> dense-index map, ordered by descending frequency."""

    def __init__(self, raw_ids: Sequence[int], counts: Sequence[int], categories: Sequence[str | None]):
        if not (len(raw_ids) == len(counts) == len(categories)):
            raise ValueError("vocabulary columns differ in length")
        self.raw_ids = [int(r) for r in raw_ids]
        self.counts = [int(c) for c in counts]
        self.categories = list(categories)
        self._index = {r: i for i, r in enumerate(self.raw_ids)}
        if len(self._index) != len(self.raw_ids):
            raise ValueError("duplicate raw ids in vocabulary")

    def __len__(self) -> int:
        return len(self.raw_ids)

    def __contains__(self, raw_id: int) -> bool:
        return raw_id in self._index

    def index(self, raw_id: int) -> int:
        return self._index[raw_id]

    def get(self, raw_id: int, default: int | None = None) -> int | None:
        return self._index.get(raw_id, default)

    def raw(self, index: int) -> int:
        return self.raw_ids[index]

    def category(self, index: int) -> str | None:
        return self.categories[index]

    def to_json(self) -> dict:
        return {"raw_ids": self.raw_ids, "counts": self.counts, "categories": self.categories}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(obj["raw_ids"], obj["counts"], obj["categories"])

    def content_hash(self) -> str:
        blob = json.dumps({"raw_ids": self.raw_ids, "categories": self.categories}, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_vocabulary(sessions: Iterable[SessionRecord], min_frequency: int = MIN_FREQUENCY) -> Vocabulary:
    """Count raw occurrences (before any cleaning) and keep items seen at least ``min_frequency`` times."""
    counts: Counter[int] = Counter()
    first_cat: dict[int, str] = {}
    seen_any = False
    for s in sessions:
        seen_any = True
        counts.update(s.items)
        if s.categories is not None:
            for item, cat in zip(s.items, s.categories):
                first_cat.setdefault(item, cat)
    if not seen_any:
        raise CorpusError("no sessions to build a vocabulary from")
    kept = sorted(((c, r) for r, c in counts.items() if c >= min_frequency), key=lambda cr: (-cr[0], cr[1]))
    if not kept:
        raise CorpusError(f"no item occurs at least {min_frequency} times")
    return Vocabulary([r for _, r in kept], [c for c, _ in kept], [first_cat.get(r) for _, r in kept])


def collapse_repeats(seq: Sequence[int]) -> list[int]:
    out: list[int] = []
    for x in seq:
        if not out or out[-1] != x:
            out.append(x)
    return out


def clean_sequence(record: SessionRecord, vocab: Vocabulary, max_length: int = MAX_SEQUENCE_LENGTH) -> list[int]:
    """Dense indices for a session, ready for augmentation.

    Drops unknown items, then (if the record carries categories) every item whose
    category differs from the last surviving item's, then collapses consecutive
    repeats and keeps the most recent ``max_length``.
    """
    pairs = [(vocab.get(r), None if record.categories is None else record.categories[k])
             for k, r in enumerate(record.items)]
    pairs = [(i, c) for i, c in pairs if i is not None]
    if not pairs:
        return []
    if record.categories is not None:
        last_cat = pairs[-1][1]
        pairs = [(i, c) for i, c in pairs if c == last_cat]
    return collapse_repeats([i for i, _ in pairs])[-max_length:]


def augment_prefixes(seq: Sequence[int]) -> list[TrainingSequence]:
    """``[a, b, c, d]`` -> ``(a)->b, (a, b)->c, (a, b, c)->d``; shorter than 2 gives nothing."""
    return [TrainingSequence(list(seq[:k]), int(seq[k])) for k in range(1, len(seq))]


@dataclass
class PreparedCorpus:
    vocab: Vocabulary
    sequences: list[list[int]]
    too_short: int = 0
    report: ParseReport = field(default_factory=ParseReport)


def prepare_corpus(
    sessions: Sequence[SessionRecord],
    min_frequency: int = MIN_FREQUENCY,
    vocab: Vocabulary | None = None,
) -> PreparedCorpus:
    """Vocabulary plus cleaned sequences (length >= 2) in corpus order."""
    vocab = vocab or build_vocabulary(sessions, min_frequency)
    seqs, short = [], 0
    for s in sessions:
        seq = clean_sequence(s, vocab)
        if len(seq) < 2:
            short += 1
            continue
        seqs.append(seq)
    return PreparedCorpus(vocab, seqs, short)


def augment_all(sequences: Iterable[Sequence[int]]) -> list[TrainingSequence]:
    out: list[TrainingSequence] = []
    for seq in sequences:
        out.extend(augment_prefixes(seq))
    return out


def split_holdout(sequences: Sequence, fraction: float = 0.1) -> tuple[list, list]:
    """Last ``fraction`` of sequences (by corpus position) become the holdout."""
    n_hold = int(round(len(sequences) * fraction))
    cut = len(sequences) - n_hold
    return list(sequences[:cut]), list(sequences[cut:])


# ---------------------------------------------------------------------------
# binary training-set format: per record, int32 n, n int32 inputs, int32 target


def write_training_set(path: str | Path, pairs: Iterable[TrainingSequence]) -> int:
    n = 0
    with open(path, "wb") as fh:
        for p in pairs:
            fh.write(struct.pack(f"<i{len(p.inputs)}ii", len(p.inputs), *p.inputs, p.target))
            n += 1
    return n


def read_training_set(path: str | Path) -> list[TrainingSequence]:
    data = np.fromfile(path, dtype="<i4")
    out: list[TrainingSequence] = []
    pos = 0
    while pos < data.size:
        n = int(data[pos])
        if n < 1 or pos + n + 2 > data.size:
            raise CorpusError(f"{path}: truncated or corrupt record at word {pos}")
        out.append(TrainingSequence(data[pos + 1:pos + 1 + n].tolist(), int(data[pos + 1 + n])))
        pos += n + 2
    return out


def save_prepared(out_dir: str | Path, corpus: PreparedCorpus, holdout: float = 0.1) -> dict:
    """Write vocab.json, train.bin, valid.bin and a manifest for a prepared corpus."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_seqs, valid_seqs = split_holdout(corpus.sequences, holdout)
    corpus.vocab.save(out / "vocab.json")
    n_train = write_training_set(out / "train.bin", augment_all(train_seqs))
    n_valid = write_training_set(out / "valid.bin", augment_all(valid_seqs))
    manifest = {
        "items": len(corpus.vocab),
        "vocab_hash": corpus.vocab.content_hash(),
        "train_sequences": len(train_seqs),
        "valid_sequences": len(valid_seqs),
        "train_pairs": n_train,
        "valid_pairs": n_valid,
        "too_short": corpus.too_short,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
