"""Synthetic three-class ABSA corpus for desk-scale training runs.

Each sentence carries one keyword whose class fixes the polarity, so a linear
map over hashed bag-of-words features can separate the classes.  Keywords are
chosen so the mock paraphraser only ever swaps them for same-class words.
"""

from __future__ import annotations

import numpy as np

from absa_forge.corpus import Triplet
from absa_forge.encoders import token_hash
from absa_forge.mock import SYNONYMS

KEYWORDS = {
    1: ("great", "excellent", "amazing", "delicious", "perfect", "wonderful"),
    0: ("ordinary", "average", "typical", "unremarkable", "routine", "plain"),
    -1: ("terrible", "awful", "horrible", "disappointing", "dreadful", "broken"),
}
ASPECTS = {
    "restaurant": ("food", "service", "pasta", "staff", "menu", "wine list", "dessert", "ambience"),
    "laptop": ("screen", "keyboard", "battery life", "speed", "touchpad", "price", "display", "charger"),
}
TEMPLATES = (
    "The {aspect} was {kw} overall.",
    "I thought the {aspect} is {kw} today.",
    "Honestly the {aspect} seemed {kw} to us.",
    "Our {aspect} looked {kw} and we noticed it.",
    "My friends said the {aspect} was {kw}.",
)


def _bucket(token: str, d: int, hash_seed: int) -> int:
    return token_hash(token, hash_seed) % d


def separable_keywords(d: int, hash_seed: int = 0) -> dict[int, tuple[str, ...]]:
    """Drop keywords whose hash bucket (or a mock synonym's bucket) is shared with another class."""
    words = {pol: {kw: {kw, *SYNONYMS.get(kw, ())} for kw in kws} for pol, kws in KEYWORDS.items()}
    owners: dict[int, set[int]] = {}
    for pol, by_kw in words.items():
        for group in by_kw.values():
            for w in group:
                owners.setdefault(_bucket(w, d, hash_seed), set()).add(pol)
    out = {}
    for pol, by_kw in words.items():
        keep = tuple(kw for kw, group in by_kw.items()
                     if all(owners[_bucket(w, d, hash_seed)] == {pol} for w in group))
        if not keep:
            raise ValueError(f"no collision-free keyword left for class {pol} at d={d}")
        out[pol] = keep
    return out


def toy_corpus(n: int = 300, seed: int = 0, domain: str = "restaurant",
               d: int | None = None, hash_seed: int = 0) -> list[Triplet]:
    """``n`` triplets, classes cycled so the label counts differ by at most one.

    Passing the encoder's ``d`` and ``hash_seed`` restricts keywords to ones
    that keep the classes linearly separable under that hashing.
    """
    rng = np.random.default_rng(seed)
    keywords = KEYWORDS if d is None else separable_keywords(d, hash_seed)
    aspects = ASPECTS.get(domain, ASPECTS["restaurant"])
    out = []
    for i in range(n):
        polarity = (1, 0, -1)[i % 3]
        kw = keywords[polarity][rng.integers(len(keywords[polarity]))]
        aspect = aspects[rng.integers(len(aspects))]
        template = TEMPLATES[rng.integers(len(TEMPLATES))]
        sentence = template.format(aspect=aspect, kw=kw)
        start = sentence.index(aspect)
        out.append(Triplet(f"toy{i}#0", sentence, aspect, start, start + len(aspect), polarity, domain))
    return out
