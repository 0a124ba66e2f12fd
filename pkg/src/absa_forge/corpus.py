"""SemEval-2014 Task 4 ingestion, JSONL persistence and per-polarity statistics."""

from __future__ import annotations

import json
import logging
import os
import re
import tempfile
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

log = logging.getLogger(__name__)

POLARITY_NAMES = {"negative": -1, "neutral": 0, "positive": 1}
POLARITY_LABELS = {v: k for k, v in POLARITY_NAMES.items()}
KNOWN_DOMAINS = ("restaurant", "laptop")
SPLITS = ("train", "test")

_WS = re.compile(r"\s+")


class CorpusError(Exception):
    pass


class XMLParseError(CorpusError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"malformed XML at line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class SchemaError(CorpusError):
    """A JSONL record does not match the expected type."""

    def __init__(self, line: int, field_name: str, message: str):
        super().__init__(f"line {line}: field {field_name!r}: {message}")
        self.line = line
        self.field = field_name


def normalize_ws(text: str) -> str:
    return _WS.sub(" ", text).strip()


@dataclass(frozen=True)
class Triplet:
    id: str
    sentence: str
    aspect: str
    aspect_from: int
    aspect_to: int
    polarity: int
    domain: str

    def __post_init__(self):
        if not self.sentence or not self.aspect:
            raise ValueError(f"{self.id}: sentence and aspect must be non-empty")
        if self.polarity not in POLARITY_LABELS:
            raise ValueError(f"{self.id}: polarity must be -1, 0 or 1, got {self.polarity!r}")

    @property
    def span(self) -> tuple[int, int]:
        return self.aspect_from, self.aspect_to

    def span_matches(self) -> bool:
        return normalize_ws(self.sentence[self.aspect_from:self.aspect_to]) == normalize_ws(self.aspect)

    def to_record(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_record(cls, rec: dict, line: int = 0) -> "Triplet":
        return cls(**_check_record(rec, _TRIPLET_SCHEMA, line))


_TRIPLET_SCHEMA = {
    "id": str,
    "sentence": str,
    "aspect": str,
    "aspect_from": int,
    "aspect_to": int,
    "polarity": int,
    "domain": str,
}


def _check_record(rec, schema: dict, line: int) -> dict:
    if not isinstance(rec, dict):
        raise SchemaError(line, "<record>", "expected a JSON object")
    out = {}
    for name, typ in schema.items():
        if name not in rec:
            raise SchemaError(line, name, "missing")
        value = rec[name]
        # bool is an int subclass; reject it where an int is expected
        if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
            raise SchemaError(line, name, f"expected {typ.__name__}, got {type(value).__name__}")
        out[name] = value
    extra = set(rec) - set(schema)
    if extra:
        raise SchemaError(line, sorted(extra)[0], "unexpected field")
    return out


@dataclass
class ParseReport:
    """Machine-readable summary of entries that did not become triplets."""

    n_sentences: int = 0
    n_triplets: int = 0
    skipped_conflict: int = 0
    skipped_other: int = 0
    invalid: list[dict] = field(default_factory=list)

    @property
    def n_invalid(self) -> int:
        return len(self.invalid)

    def as_dict(self) -> dict:
        return {
            "n_sentences": self.n_sentences,
            "n_triplets": self.n_triplets,
            "skipped_conflict": self.skipped_conflict,
            "skipped_other": self.skipped_other,
            "n_invalid": self.n_invalid,
            "invalid": list(self.invalid),
        }


def parse_semeval_xml(
    data: bytes | str, domain: str, report: ParseReport | None = None
) -> list[Triplet]:
    """Parse a SemEval-2014 Task 4 document into triplets, in document order.

    ``conflict`` terms are skipped and counted, as are entries whose
    ``from``/``to`` offsets do not point at ``term``.  Pass a ``ParseReport``
    to collect those counts.
    """
    if report is None:
        report = ParseReport()
    if isinstance(data, str):
        data = data.encode("utf-8")
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, col = exc.position
        raise XMLParseError(str(exc), line, col) from None

    sentences = [root] if root.tag == "sentence" else root.iter("sentence")
    out = []
    for sent in sentences:
        report.n_sentences += 1
        sid = sent.get("id", str(report.n_sentences))
        text_el = sent.find("text")
        text = text_el.text if text_el is not None and text_el.text else ""
        terms = sent.find("aspectTerms")
        if terms is None:
            continue
        for idx, term_el in enumerate(terms.findall("aspectTerm")):
            pol_name = (term_el.get("polarity") or "").strip().lower()
            if pol_name == "conflict":
                report.skipped_conflict += 1
                continue
            if pol_name not in POLARITY_NAMES:
                report.skipped_other += 1
                report.invalid.append({"sentence_id": sid, "index": idx, "reason": f"unknown polarity {pol_name!r}"})
                continue
            term = term_el.get("term") or ""
            try:
                start, end = int(term_el.get("from")), int(term_el.get("to"))
            except (TypeError, ValueError):
                report.invalid.append({"sentence_id": sid, "index": idx, "reason": "missing or non-integer offsets"})
                continue
            if not text or not term.strip() or normalize_ws(text[start:end]) != normalize_ws(term):
                report.invalid.append({
                    "sentence_id": sid,
                    "index": idx,
                    "reason": f"offset mismatch: text[{start}:{end}]={text[start:end]!r} vs term={term!r}",
                })
                continue
            out.append(Triplet(
                id=f"{sid}#{idx}",
                sentence=text,
                aspect=term,
                aspect_from=start,
                aspect_to=end,
                polarity=POLARITY_NAMES[pol_name],
                domain=domain,
            ))
    report.n_triplets += len(out)
    if report.invalid:
        log.warning("%d aspect terms failed validation", report.n_invalid)
    return out


@dataclass(frozen=True)
class CorpusStats:
    split: str
    positive: int = 0
    neutral: int = 0
    negative: int = 0

    @property
    def total(self) -> int:
        return self.positive + self.neutral + self.negative

    def line(self) -> str:
        return f"positive={self.positive} neutral={self.neutral} negative={self.negative}"

    def as_dict(self) -> dict:
        return {"split": self.split, "positive": self.positive, "neutral": self.neutral,
                "negative": self.negative, "total": self.total}


def compute_stats(triplets: Iterable[Triplet], split: str) -> CorpusStats:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    counts = {name: 0 for name in POLARITY_NAMES}
    for t in triplets:
        counts[POLARITY_LABELS[t.polarity]] += 1
    return CorpusStats(split=split, **counts)


def write_jsonl(items: Iterable, path: str | os.PathLike) -> None:
    """Write records atomically: a temp file in the same directory is renamed over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            for item in items:
                rec = item.to_record() if hasattr(item, "to_record") else item
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_jsonl(path: str | os.PathLike, kind=Triplet) -> list:
    """Read records of ``kind`` (any class with ``from_record``); ``kind=None`` returns raw dicts."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(lineno, "<record>", f"invalid JSON: {exc.msg}") from None
            if kind is None:
                out.append(rec)
                continue
            try:
                out.append(kind.from_record(rec, lineno))
            except SchemaError:
                raise
            except (TypeError, ValueError) as exc:
                raise SchemaError(lineno, "<record>", str(exc)) from None
    return out
