"""Offline, deterministic stand-in for a chat-completions backend.

Replies are a pure function of (messages, seed, retry ordinal).  CDA-shaped
prompts get a synonym-table paraphrase that leaves the aspect untouched;
ADA-shaped prompts get a term from a per-domain lexicon.  Scripts can force
repeated aspects, dropped aspects, canned replies and transient HTTP failures.
"""

from __future__ import annotations

import hashlib
import re
import threading
from dataclasses import dataclass, field

from absa_forge.gateway import PermanentError, PromptRequest, TransientError
from absa_forge.prompts import classify_prompt

SYNONYMS: dict[str, tuple[str, ...]] = {
    "incredible": ("extraordinary",),
    "satisfied": ("content",),
    "standard": ("mediocre",),
    "great": ("excellent", "superb"),
    "good": ("fine", "decent"),
    "nice": ("pleasant", "lovely"),
    "bad": ("poor", "awful"),
    "terrible": ("dreadful", "horrible"),
    "awful": ("terrible", "dreadful"),
    "amazing": ("astonishing", "wonderful"),
    "excellent": ("outstanding", "superb"),
    "delicious": ("tasty", "scrumptious"),
    "fast": ("quick", "speedy"),
    "slow": ("sluggish",),
    "love": ("adore",),
    "like": ("enjoy",),
    "hate": ("detest",),
    "friendly": ("welcoming", "kind"),
    "rude": ("impolite",),
    "cheap": ("inexpensive",),
    "expensive": ("pricey", "costly"),
    "big": ("large",),
    "small": ("little", "tiny"),
    "happy": ("pleased", "glad"),
    "very": ("really", "extremely"),
    "really": ("truly",),
    "okay": ("fine",),
    "fine": ("acceptable",),
    "beautiful": ("gorgeous", "lovely"),
    "horrible": ("awful", "dreadful"),
    "perfect": ("flawless", "ideal"),
    "disappointing": ("underwhelming",),
    "boring": ("dull",),
    "works": ("functions", "operates"),
}

LEXICONS: dict[str, tuple[str, ...]] = {
    "laptop": (
        "performance", "battery life", "screen", "keyboard", "display", "processor", "graphics",
        "touchpad", "design", "memory", "speakers", "price", "software", "hard drive", "charger",
    ),
    "restaurant": (
        "curry", "food", "service", "staff", "ambience", "decor", "dessert", "pasta", "wine list",
        "sushi", "pizza", "menu", "prices", "waiter", "atmosphere",
    ),
}
LEXICONS["generic"] = LEXICONS["laptop"] + LEXICONS["restaurant"]

_WORD = re.compile(r"[A-Za-z]+(?:'[A-Za-z]+)?")


def _norm(s: str) -> str:
    return " ".join(s.lower().split())


def _pick(options, *parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") % len(options)


def _match_case(word: str, repl: str) -> str:
    if word.isupper() and len(word) > 1:
        return repl.upper()
    if word[:1].isupper():
        return repl[:1].upper() + repl[1:]
    return repl


def paraphrase(sentence: str, aspect: str, seed: int = 0, ordinal: int = 0) -> str:
    """Swap context words via ``SYNONYMS``; characters of the aspect occurrence are never touched."""
    lo = sentence.lower().find(aspect.lower()) if aspect else -1
    protected = range(lo, lo + len(aspect)) if lo >= 0 else range(0)
    pieces, last = [], 0
    for m in _WORD.finditer(sentence):
        if m.start() in protected or (m.end() - 1) in protected:
            continue
        options = SYNONYMS.get(m.group().lower())
        if not options:
            continue
        repl = options[_pick(options, seed, ordinal, sentence, m.start())]
        pieces.append(sentence[last:m.start()])
        pieces.append(_match_case(m.group(), repl))
        last = m.end()
    pieces.append(sentence[last:])
    return "".join(pieces)


def drop_aspect(sentence: str, aspect: str) -> str:
    out = re.sub(re.escape(aspect), "thing", sentence, flags=re.I)
    return out if aspect.lower() not in out.lower() else "It is fine."


@dataclass
class MockScript:
    """Knobs for scripted behaviour.

    ``canned_cda`` / ``canned_ada`` map a source sentence to replies indexed by
    retry ordinal (the last reply repeats).  ``fail_with`` is a queue of HTTP
    statuses raised on successive sends before normal replies resume.
    """

    repeat_original: int = 0
    drop_aspect: bool = False
    domain: str | None = None
    canned_cda: dict[str, list[str]] = field(default_factory=dict)
    canned_ada: dict[str, list[str]] = field(default_factory=dict)
    fail_with: list[int] = field(default_factory=list)
    lexicons: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(LEXICONS))

    @classmethod
    def from_dict(cls, d: dict) -> "MockScript":
        d = dict(d or {})
        if "lexicons" in d:
            d["lexicons"] = {**LEXICONS, **{k: tuple(v) for k, v in d["lexicons"].items()}}
        return cls(**d)


def _canned(table: dict[str, list[str]], sentence: str, ordinal: int) -> str | None:
    replies = table.get(sentence)
    if not replies:
        return None
    return replies[min(ordinal, len(replies) - 1)]


def mock_respond(req: PromptRequest, script: MockScript, seed: int, ordinal: int = 0) -> str:
    parsed = classify_prompt(req.last_user_content)
    if parsed is None:
        # unknown prompt shape: echo so misuse is visible rather than silent
        return req.last_user_content
    kind, sentence, aspect = parsed
    if kind == "cda":
        canned = _canned(script.canned_cda, sentence, ordinal)
        if canned is not None:
            return canned
        if script.drop_aspect:
            return drop_aspect(sentence, aspect)
        return paraphrase(sentence, aspect, seed, ordinal)

    canned = _canned(script.canned_ada, sentence, ordinal)
    if canned is not None:
        return canned
    if ordinal < script.repeat_original:
        return aspect
    lexicon = _lexicon_for(script, aspect)
    choices = [t for t in lexicon if _norm(t) != _norm(aspect)]
    return choices[_pick(choices, seed, ordinal, sentence, aspect)]


def _lexicon_for(script: MockScript, aspect: str) -> tuple[str, ...]:
    if script.domain and script.domain in script.lexicons:
        return script.lexicons[script.domain]
    for name in ("laptop", "restaurant"):
        if _norm(aspect) in {_norm(t) for t in script.lexicons.get(name, ())}:
            return script.lexicons[name]
    return script.lexicons["generic"]


class MockBackend:
    """Backend wrapper around ``mock_respond``; counts sends for call-budget assertions."""

    def __init__(self, script: MockScript | None = None, seed: int = 0):
        self.script = script or MockScript()
        self.seed = seed
        self.backend_id = f"mock:{seed}"
        self.calls: list[tuple[PromptRequest, int]] = []
        self._failures = list(self.script.fail_with)
        self._lock = threading.Lock()

    def send(self, req: PromptRequest, ordinal: int = 0) -> str:
        with self._lock:
            self.calls.append((req, ordinal))
            status = self._failures.pop(0) if self._failures else None
        if status is not None:
            if status == 429 or status >= 500:
                raise TransientError(f"HTTP {status} (scripted)", status=status)
            raise PermanentError(f"HTTP {status} (scripted)", status=status)
        return mock_respond(req, self.script, self.seed, ordinal)
