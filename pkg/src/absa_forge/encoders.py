"""Frozen sentence-pair encoders.

Both variants embed the literal ``[CLS]{sentence}[SEP]{aspect}[SEP]`` string,
so the pairing convention of the BERT sentence-pair input is kept even when
the encoder is a hashing stand-in.
"""

from __future__ import annotations

import hashlib
import os
import re

import httpx
import numpy as np

from absa_forge.gateway import API_KEY_ENV

_TOKEN = re.compile(r"\w+", re.UNICODE)


def pair_text(sentence: str, aspect: str) -> str:
    return f"[CLS]{sentence}[SEP]{aspect}[SEP]"


def token_hash(token: str, seed: int = 0) -> int:
    salt = seed.to_bytes(8, "little", signed=True)
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8, salt=salt).digest(), "little")


def hash_embed(text: str, d: int, seed: int = 0) -> np.ndarray:
    """Signed feature-hashing bag of words, L2-normalised (zero vector for no tokens)."""
    if d < 8:
        raise ValueError(f"embedding dimension must be >= 8, got {d}")
    v = np.zeros(d)
    for tok in _TOKEN.findall(text.lower()):
        x = token_hash(tok, seed)
        v[x % d] += 1.0 if (x >> 63) & 1 else -1.0
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


class HashEncoder:
    kind = "hash"

    def __init__(self, d: int = 512, seed: int = 0):
        if d < 8:
            raise ValueError("d must be >= 8")
        self.d = d
        self.seed = seed

    def encode(self, sentence: str, aspect: str) -> np.ndarray:
        return hash_embed(pair_text(sentence, aspect), self.d, self.seed)

    def encode_many(self, pairs) -> np.ndarray:
        pairs = list(pairs)
        if not pairs:
            return np.zeros((0, self.d))
        return np.stack([self.encode(s, a) for s, a in pairs])

    def describe(self) -> dict:
        return {"kind": self.kind, "d": self.d, "seed": self.seed}


class RemoteEncoder:
    """OpenAI-compatible ``/v1/embeddings`` client for full-scale runs.

    Results are memoised per instance so repeated epochs cost one request per text.
    """

    kind = "remote"

    def __init__(self, endpoint: str, model: str, d: int, api_key: str | None = None,
                 timeout: float = 60.0, batch_size: int = 64, client=None):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.d = d
        self.batch_size = batch_size
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._client = client or httpx.Client(timeout=timeout, headers=headers)
        self._memo: dict[str, np.ndarray] = {}

    @property
    def url(self) -> str:
        return self.endpoint + ("/embeddings" if self.endpoint.endswith("/v1") else "/v1/embeddings")

    def _fetch(self, texts: list[str]) -> list[np.ndarray]:
        resp = self._client.post(self.url, json={"model": self.model, "input": texts})
        resp.raise_for_status()
        rows = sorted(resp.json()["data"], key=lambda r: r["index"])
        out = []
        for r in rows:
            v = np.asarray(r["embedding"], dtype=float)
            if v.shape != (self.d,):
                raise ValueError(f"embedding has shape {v.shape}, expected ({self.d},)")
            out.append(v)
        return out

    def encode(self, sentence: str, aspect: str) -> np.ndarray:
        return self.encode_many([(sentence, aspect)])[0]

    def encode_many(self, pairs) -> np.ndarray:
        texts = [pair_text(s, a) for s, a in pairs]
        missing = list(dict.fromkeys(t for t in texts if t not in self._memo))
        for i in range(0, len(missing), self.batch_size):
            chunk = missing[i:i + self.batch_size]
            for text, vec in zip(chunk, self._fetch(chunk)):
                self._memo[text] = vec
        if not texts:
            return np.zeros((0, self.d))
        return np.stack([self._memo[t] for t in texts])

    def describe(self) -> dict:
        return {"kind": self.kind, "d": self.d, "endpoint": self.endpoint, "model": self.model}


def encoder_from_description(desc: dict):
    if desc["kind"] == "hash":
        return HashEncoder(desc["d"], desc.get("seed", 0))
    if desc["kind"] == "remote":
        return RemoteEncoder(desc["endpoint"], desc["model"], desc["d"])
    raise ValueError(f"unknown encoder kind {desc['kind']!r}")
