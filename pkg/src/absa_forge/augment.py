"""CDA, ADA and CADA augmentation with the distinct-aspect verification loop."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from absa_forge.corpus import Triplet, _check_record, normalize_ws
from absa_forge.gateway import DEFAULT_MODEL, Gateway, PromptRequest
from absa_forge.prompts import DEFAULT_EXEMPLARS, ExemplarPair, build_ada_prompt, build_cda_prompt

log = logging.getLogger(__name__)

KINDS = ("CDA", "ADA", "CADA")
CDA_TEMPERATURE = 0.0
ADA_TEMPERATURE = 1.0
DEFAULT_MAX_VERIFY_RETRIES = 5
DEFAULT_MAX_AUG_RETRIES = 2


class AugmentError(Exception):
    pass


class InvalidResponse(AugmentError):
    pass


class SubstitutionError(AugmentError):
    pass


@dataclass(frozen=True)
class Strategy:
    kind: str
    verify: bool = False

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        # CDA never changes the aspect, so verification has nothing to check
        if kind == "CDA" and self.verify:
            object.__setattr__(self, "verify", False)

    @property
    def name(self) -> str:
        return f"{self.kind}-veri" if self.verify else self.kind


@dataclass(frozen=True)
class AugmentedSample:
    source_id: str
    aug_sentence: str
    aug_aspect: str
    polarity: int
    strategy: Strategy
    retries_used: int = 0
    verified_distinct: bool = False
    fallback: bool = False

    def to_record(self) -> dict:
        return {
            "source_id": self.source_id,
            "aug_sentence": self.aug_sentence,
            "aug_aspect": self.aug_aspect,
            "polarity": self.polarity,
            "strategy": self.strategy.kind,
            "verify": self.strategy.verify,
            "retries_used": self.retries_used,
            "verified_distinct": self.verified_distinct,
            "fallback": self.fallback,
        }

    @classmethod
    def from_record(cls, rec: dict, line: int = 0) -> "AugmentedSample":
        r = _check_record(rec, _AUG_SCHEMA, line)
        strategy = Strategy(r.pop("strategy"), r.pop("verify"))
        return cls(strategy=strategy, **r)


_AUG_SCHEMA = {
    "source_id": str,
    "aug_sentence": str,
    "aug_aspect": str,
    "polarity": int,
    "strategy": str,
    "verify": bool,
    "retries_used": int,
    "verified_distinct": bool,
    "fallback": bool,
}


def normalize_aspect(s: str) -> str:
    return " ".join(s.lower().split())


_QUOTES = {'"': '"', "'": "'", "“": "”", "‘": "’", "«": "»", "`": "`", "$": "$"}
_LABEL = re.compile(r"^\s*(?:the\s+)?(?:new\s+)?(?:aspect(?:\s+term)?|term|sentence)\s*[:：\-–]\s*", re.I)
_TRAILING_PUNCT = ".!?;:,。"


def _strip_quotes(s: str) -> str:
    while len(s) >= 2 and s[0] in _QUOTES and s[-1] == _QUOTES[s[0]]:
        s = s[1:-1].strip()
    return s


def sanitize_aspect(raw: str) -> str:
    """Clean an ADA reply down to the bare aspect term; raises ``InvalidResponse`` if nothing is left."""
    s = raw.strip()
    s = s.splitlines()[0].strip() if s else s
    s = _LABEL.sub("", s, count=1).strip()
    prev = None
    while s != prev:
        prev = s
        s = _strip_quotes(s).rstrip(_TRAILING_PUNCT).strip()
    s = " ".join(s.split())
    if not s:
        raise InvalidResponse(f"empty aspect after sanitizing {raw!r}")
    return s


def sanitize_sentence(raw: str) -> str:
    s = raw.strip()
    s = re.sub(r"^\s*(?:the\s+)?new\s+sentence\s*[:：]\s*", "", s, flags=re.I).strip()
    s = _strip_quotes(s)
    return s


def substitute_aspect(sentence: str, span: tuple[int, int] | None, old_aspect: str, new_aspect: str) -> str:
    """Put ``new_aspect`` in place of one occurrence of ``old_aspect``.

    With a span, exactly ``sentence[start:end]`` is replaced; without one the
    first case-insensitive occurrence is.
    """
    if span is not None:
        start, end = span
        if not 0 <= start <= end <= len(sentence):
            raise SubstitutionError(f"span {span} out of range for sentence of length {len(sentence)}")
        return sentence[:start] + new_aspect + sentence[end:]
    pos = sentence.lower().find(old_aspect.lower())
    if pos < 0 or not old_aspect:
        raise SubstitutionError(f"aspect {old_aspect!r} not found in {sentence!r}")
    return sentence[:pos] + new_aspect + sentence[pos + len(old_aspect):]


def _contains_aspect(sentence: str, aspect: str) -> bool:
    return aspect.lower() in sentence.lower()


@dataclass
class AugmentSettings:
    model: str = DEFAULT_MODEL
    exemplars: Sequence[ExemplarPair] = DEFAULT_EXEMPLARS
    max_verify_retries: int = DEFAULT_MAX_VERIFY_RETRIES
    max_aug_retries: int = DEFAULT_MAX_AUG_RETRIES
    max_transport_retries: int = 3


def augment_cda(t: Triplet, gateway: Gateway, exemplars=DEFAULT_EXEMPLARS,
                max_aug_retries: int = DEFAULT_MAX_AUG_RETRIES, model: str = DEFAULT_MODEL,
                max_transport_retries: int = 3) -> AugmentedSample:
    req = PromptRequest.user(build_cda_prompt(t.sentence, t.aspect, exemplars),
                             model=model, temperature=CDA_TEMPERATURE, max_retries=max_transport_retries)
    for ordinal in range(max_aug_retries + 1):
        reply = sanitize_sentence(gateway.complete(req, ordinal).text)
        if reply and _contains_aspect(reply, t.aspect):
            return AugmentedSample(t.id, reply, t.aspect, t.polarity, Strategy("CDA"), retries_used=ordinal)
        log.debug("%s: CDA reply lost aspect %r (attempt %d)", t.id, t.aspect, ordinal + 1)
    log.info("%s: CDA kept dropping the aspect, falling back to the source sentence", t.id)
    return AugmentedSample(t.id, t.sentence, t.aspect, t.polarity, Strategy("CDA"),
                           retries_used=max_aug_retries, fallback=True)


def augment_ada(t: Triplet, gateway: Gateway, verify: bool = False,
                max_verify_retries: int = DEFAULT_MAX_VERIFY_RETRIES, model: str = DEFAULT_MODEL,
                max_transport_retries: int = 3) -> AugmentedSample:
    """Ask for a replacement aspect and splice it into the source span.

    With ``verify`` the same prompt is re-sent (next retry ordinal) while the
    reply equals the original aspect, at most ``max_verify_retries`` times.  An
    empty reply also costs a retry.  On exhaustion the last reply is kept and
    ``verified_distinct`` stays False.
    """
    if max_verify_retries < 1:
        raise ValueError("max_verify_retries must be positive")
    req = PromptRequest.user(build_ada_prompt(t.sentence, t.aspect),
                             model=model, temperature=ADA_TEMPERATURE, max_retries=max_transport_retries)
    original = normalize_aspect(t.aspect)
    retries = 0
    aspect = None
    while True:
        try:
            aspect = sanitize_aspect(gateway.complete(req, retries).text)
        except InvalidResponse:
            aspect = None
        acceptable = aspect is not None and (not verify or normalize_aspect(aspect) != original)
        # without verification only an empty reply is worth asking again for
        if acceptable or retries >= max_verify_retries:
            break
        retries += 1

    fallback = False
    if aspect is None:
        aspect, fallback = t.aspect, True
    distinct = normalize_aspect(aspect) != original
    sentence = substitute_aspect(t.sentence, t.span, t.aspect, aspect)
    return AugmentedSample(t.id, sentence, aspect, t.polarity, Strategy("ADA", verify),
                           retries_used=retries, verified_distinct=distinct, fallback=fallback)


def augment_cada(t: Triplet, gateway: Gateway, exemplars=DEFAULT_EXEMPLARS, verify: bool = False,
                 max_verify_retries: int = DEFAULT_MAX_VERIFY_RETRIES,
                 max_aug_retries: int = DEFAULT_MAX_AUG_RETRIES, model: str = DEFAULT_MODEL,
                 max_transport_retries: int = 3) -> AugmentedSample:
    """CDA and ADA on the same source, then the new aspect goes into the paraphrase."""
    cda = augment_cda(t, gateway, exemplars, max_aug_retries, model, max_transport_retries)
    ada = augment_ada(t, gateway, verify, max_verify_retries, model, max_transport_retries)
    fallback = cda.fallback
    try:
        sentence = substitute_aspect(cda.aug_sentence, None, t.aspect, ada.aug_aspect)
    except SubstitutionError:
        sentence, fallback = ada.aug_sentence, True
    return AugmentedSample(t.id, sentence, ada.aug_aspect, t.polarity, Strategy("CADA", verify),
                           retries_used=ada.retries_used, verified_distinct=ada.verified_distinct,
                           fallback=fallback or ada.fallback)


def augment_one(t: Triplet, gateway: Gateway, strategy: Strategy, settings: AugmentSettings) -> AugmentedSample:
    common = dict(model=settings.model, max_transport_retries=settings.max_transport_retries)
    if strategy.kind == "CDA":
        return augment_cda(t, gateway, settings.exemplars, settings.max_aug_retries, **common)
    if strategy.kind == "ADA":
        return augment_ada(t, gateway, strategy.verify, settings.max_verify_retries, **common)
    return augment_cada(t, gateway, settings.exemplars, strategy.verify, settings.max_verify_retries,
                        settings.max_aug_retries, **common)


@dataclass
class AugmentReport:
    n: int = 0
    fallbacks: int = 0
    total_retries: int = 0
    distinct: int = 0
    dropped: list[dict] = field(default_factory=list)

    @property
    def mean_retries(self) -> float:
        return self.total_retries / self.n if self.n else 0.0

    @property
    def distinct_rate(self) -> float:
        return self.distinct / self.n if self.n else 0.0

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "fallbacks": self.fallbacks,
            "mean_retries": self.mean_retries,
            "distinct_aspect_rate": self.distinct_rate,
            "dropped": list(self.dropped),
        }


def augment_corpus(
    triplets: Sequence[Triplet],
    gateway: Gateway,
    strategy: Strategy,
    settings: AugmentSettings | None = None,
    exemplars_by_domain: dict[str, Sequence[ExemplarPair]] | None = None,
    workers: int | None = None,
) -> tuple[list[AugmentedSample], AugmentReport]:
    """Augment every triplet; output order follows input order whatever the completion order.

    Samples whose substitution fails are dropped and listed in the report.
    """
    settings = settings or AugmentSettings()
    workers = workers or gateway.max_in_flight

    def run(t: Triplet):
        s = settings
        if exemplars_by_domain and t.domain in exemplars_by_domain:
            s = AugmentSettings(**{**s.__dict__, "exemplars": exemplars_by_domain[t.domain]})
        try:
            return augment_one(t, gateway, strategy, s)
        except SubstitutionError as exc:
            return exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, triplets))
    else:
        results = [run(t) for t in triplets]

    report = AugmentReport()
    samples = []
    for t, res in zip(triplets, results):
        if isinstance(res, Exception):
            report.dropped.append({"source_id": t.id, "reason": str(res)})
            continue
        samples.append(res)
        report.n += 1
        report.fallbacks += res.fallback
        report.total_retries += res.retries_used
        report.distinct += res.verified_distinct
    return samples, report


def check_sample(sample: AugmentedSample, source: Triplet) -> list[str]:
    """Return the invariants ``sample`` violates with respect to ``source`` (empty when sound)."""
    problems = []
    if sample.polarity != source.polarity:
        problems.append("polarity changed")
    kind = sample.strategy.kind
    if kind == "CDA":
        if sample.aug_aspect != source.aspect:
            problems.append("CDA changed the aspect")
        if not _contains_aspect(sample.aug_sentence, sample.aug_aspect):
            problems.append("CDA sentence lost the aspect")
    if sample.strategy.verify and sample.verified_distinct:
        if normalize_aspect(sample.aug_aspect) == normalize_aspect(source.aspect):
            problems.append("marked distinct but aspects match")
    if kind == "ADA":
        expected = substitute_aspect(source.sentence, source.span, source.aspect, sample.aug_aspect)
        if sample.aug_sentence != expected:
            problems.append("ADA sentence is not an in-place substitution")
    if not normalize_ws(sample.aug_sentence):
        problems.append("empty sentence")
    return problems
