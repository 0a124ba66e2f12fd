"""ChatGPT-style augmentation (CDA / ADA / CADA) and contrastive training for ABSA corpora."""

from absa_forge.corpus import CorpusStats, ParseReport, Triplet, compute_stats, parse_semeval_xml

__version__ = "0.1.0"

__all__ = [
    "CorpusStats",
    "ParseReport",
    "Triplet",
    "compute_stats",
    "parse_semeval_xml",
]
