"""CDA and ADA prompt templates.

Rendered byte-exactly, including the curly quotes and ``$...$`` aspect markers.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

CDA_CLOSING = "Please only output the New sentence."
ADA_CLOSING = "Please only output the new aspect term."

_HEAD = "Given the sentence: “{sentence}”, and given the aspect term “${aspect}$” in above sentence."

CDA_TEMPLATE = (
    _HEAD + "\n"
    "\n"
    "Please generate one new sentence using paraphrasing. The new sentence should not paraphrase the aspect "
    "term “${aspect}$” and should keep the aspect term “${aspect}$”, semantics of the "
    "sentence, and sentiment polarity towards the aspect term “${aspect}$” unchanged.\n"
    "\n"
    "Here are a few examples:\n"
    "{examples}\n"
    "\n" + CDA_CLOSING
)

ADA_TEMPLATE = (
    _HEAD + "\n"
    "\n"
    "Please replace the given aspect term in the given sentence with a new semantically and logically "
    "suitable aspect term and also keep the sentiment polarity towards the new aspect term unchanged.\n"
    "\n" + ADA_CLOSING
)

_SLOT_RE = re.compile(r"\{(sentence|aspect|examples)\}")

EXAMPLE_LINE = "Source sentence: {source} → New sentence: {augmented}"

_HEAD_RE = re.compile(
    r"^Given the sentence: “(?P<sentence>.*)”, and given the aspect term “\$(?P<aspect>.*?)\$” in above sentence\.",
    re.S,
)


@dataclass(frozen=True)
class ExemplarPair:
    source_sentence: str
    augmented_sentence: str
    domain: str
    aspect: str = ""

    def __post_init__(self):
        if not self.source_sentence or not self.augmented_sentence:
            raise ValueError("exemplar sentences must be non-empty")
        if self.aspect and (self.aspect not in self.source_sentence or self.aspect not in self.augmented_sentence):
            raise ValueError(f"exemplar must keep aspect {self.aspect!r} verbatim")


# The two published source -> CDA example rows; no per-domain exemplar pairs exist, so both domains share these.
DEFAULT_EXEMPLARS = (
    ExemplarPair(
        "The speed is incredible and I am more than satisfied.",
        "The speed is extraordinary and I am more than content.",
        "laptop",
        "speed",
    ),
    ExemplarPair(
        "The palak paneer was standard, and I was not a fan of the malai kofta.",
        "The palak paneer was mediocre, and I did not enjoy the creamy vegetable balls.",
        "restaurant",
        "palak paneer",
    ),
)


class PromptConfigError(ValueError):
    pass


def build_cda_prompt(sentence: str, aspect: str, exemplars=DEFAULT_EXEMPLARS) -> str:
    exemplars = list(exemplars)
    if len(exemplars) != 2:
        raise PromptConfigError(f"the CDA prompt takes exactly 2 exemplars, got {len(exemplars)}")
    examples = "\n".join(
        EXAMPLE_LINE.format(source=ex.source_sentence, augmented=ex.augmented_sentence) for ex in exemplars
    )
    return _render(CDA_TEMPLATE, sentence=sentence, aspect=aspect, examples=examples)


def build_ada_prompt(sentence: str, aspect: str) -> str:
    return _render(ADA_TEMPLATE, sentence=sentence, aspect=aspect)


def _render(template: str, **slots: str) -> str:
    # single pass: braces inside review text are never re-expanded (str.format would choke on them)
    return _SLOT_RE.sub(lambda m: slots[m.group(1)], template)


def classify_prompt(text: str) -> tuple[str, str, str] | None:
    """Recognise a rendered prompt: returns ``(kind, sentence, aspect)`` or None."""
    if text.endswith(CDA_CLOSING):
        kind = "cda"
    elif text.endswith(ADA_CLOSING):
        kind = "ada"
    else:
        return None
    first = text.split("\n\n", 1)[0]
    m = _HEAD_RE.match(first)
    if not m:
        return None
    return kind, m.group("sentence"), m.group("aspect")
