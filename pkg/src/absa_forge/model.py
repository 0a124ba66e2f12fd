"""Projection + classifier head over a frozen encoder, the training losses and their gradients.

Shapes: ``E`` is N x d (encoder output), ``H`` is N x p (tanh projection),
logits are N x 3.  Labels are polarities in {-1, 0, 1} and map to class
indices 0, 1, 2 in that order everywhere.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

LABEL_TO_INDEX = {-1: 0, 0: 1, 1: 2}
INDEX_TO_LABEL = {v: k for k, v in LABEL_TO_INDEX.items()}
N_CLASSES = 3
CHECKPOINT_FORMAT = 1


class ContractError(ValueError):
    pass


@dataclass
class Hyperparams:
    alpha: float = 0.2
    beta: float = 0.4
    tau: float = 0.08
    learning_rate: float = 2e-5
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 10
    dropout_rate: float = 0.1
    seed: int = 0
    proj_dim: int = 64

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError(f"tau must be > 0, got {self.tau}")
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be non-negative")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ContractError(f"patience ({self.patience}) must be in [0, max_epochs={self.max_epochs}]")
        if not 0 <= self.dropout_rate < 1:
            raise ContractError("dropout_rate must be in [0, 1)")

    def as_dict(self) -> dict:
        return asdict(self)


PARAM_NAMES = ("W_p", "b_p", "W_s", "b_s")


@dataclass
class ModelParams:
    W_p: np.ndarray
    b_p: np.ndarray
    W_s: np.ndarray
    b_s: np.ndarray

    def __post_init__(self):
        d, p = self.W_p.shape
        if self.b_p.shape != (p,) or self.W_s.shape != (p, N_CLASSES) or self.b_s.shape != (N_CLASSES,):
            raise ContractError(
                f"inconsistent shapes W_p={self.W_p.shape} b_p={self.b_p.shape} "
                f"W_s={self.W_s.shape} b_s={self.b_s.shape}"
            )

    @property
    def d(self) -> int:
        return self.W_p.shape[0]

    @property
    def p(self) -> int:
        return self.W_p.shape[1]

    @classmethod
    def init(cls, d: int, p: int, seed: int = 0) -> "ModelParams":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        lim_p = math.sqrt(6.0 / (d + p))
        lim_s = math.sqrt(6.0 / (p + N_CLASSES))
        return cls(
            W_p=rng.uniform(-lim_p, lim_p, size=(d, p)),
            b_p=np.zeros(p),
            W_s=rng.uniform(-lim_s, lim_s, size=(p, N_CLASSES)),
            b_s=np.zeros(N_CLASSES),
        )

    @classmethod
    def zeros(cls, d: int, p: int) -> "ModelParams":
        return cls(np.zeros((d, p)), np.zeros(p), np.zeros((p, N_CLASSES)), np.zeros(N_CLASSES))

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(*(getattr(self, n).copy() for n in PARAM_NAMES))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())


def labels_to_index(labels) -> np.ndarray:
    try:
        return np.array([LABEL_TO_INDEX[int(lab)] for lab in labels], dtype=np.int64)
    except KeyError as exc:
        raise ContractError(f"label {exc.args[0]!r} is not a polarity in {{-1, 0, 1}}") from None


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by 1/(1-rate)."""
    if rate <= 0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def forward(params: ModelParams, e: np.ndarray, *, train: bool = False, mask: np.ndarray | None = None):
    """Return ``(h, logits)`` for one vector (d,) or a batch (N, d).

    Eval mode ignores dropout.  Train mode multiplies ``e`` by ``mask``, which
    the caller draws with ``dropout_mask`` so gradients can reuse it.
    """
    e = np.asarray(e, dtype=float)
    if e.shape[-1] != params.d:
        raise ContractError(f"input dimension {e.shape[-1]} does not match W_p rows {params.d}")
    if train:
        if mask is None:
            raise ContractError("train mode needs a dropout mask")
        e = e * mask
    h = np.tanh(e @ params.W_p + params.b_p)
    logits = h @ params.W_s + params.b_s
    return h, logits


def _logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-row softmax cross-entropy (natural log) for class indices ``targets``."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    if not np.all(np.isfinite(logits)):
        raise ContractError("non-finite logits")
    return _logsumexp(logits, axis=1) - logits[np.arange(len(logits)), targets]


def ce_loss(logits, label: int) -> float:
    return float(cross_entropy(np.asarray(logits, dtype=float)[None, :], labels_to_index([label]))[0])


def _check_batch(E_src, E_aug, labels):
    E_src = np.atleast_2d(np.asarray(E_src, dtype=float))
    E_aug = np.atleast_2d(np.asarray(E_aug, dtype=float))
    if E_src.shape != E_aug.shape:
        raise ContractError(f"source batch {E_src.shape} and augmented batch {E_aug.shape} differ")
    if len(labels) != len(E_src):
        raise ContractError(f"{len(labels)} labels for a batch of {len(E_src)}")
    if len(E_src) < 1:
        raise ContractError("empty batch")
    return E_src, E_aug, labels_to_index(labels)


def ssct_loss(E_src, E_aug, labels, params: ModelParams, alpha: float, masks=None) -> float:
    """Mean over the batch of CE(source) + alpha * CE(augmented), both through ``forward``."""
    E_src, E_aug, y = _check_batch(E_src, E_aug, labels)
    _, z = _fwd(params, E_src, masks, 0)
    _, z_aug = _fwd(params, E_aug, masks, 1)
    return _ssct_from_logits(z, z_aug, y, alpha)


def _fwd(params, E, masks, which):
    if masks is None:
        return forward(params, E)
    return forward(params, E, train=True, mask=masks[which])


def _ssct_from_logits(z, z_aug, y, alpha) -> float:
    return float(np.mean(cross_entropy(z, y) + alpha * cross_entropy(z_aug, y)))


def _unit_rows(H: np.ndarray, what: str):
    norms = np.linalg.norm(H, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ContractError(f"{what} row {int(bad[0])} has zero norm; cosine similarity is undefined")
    return H / norms[:, None], norms


def info_nce(H, H_plus, tau: float) -> float:
    """InfoNCE over cosine similarities; row i's candidates are all augmented rows j (j = i included)."""
    if not tau > 0:
        raise ContractError(f"tau must be > 0, got {tau}")
    H = np.atleast_2d(np.asarray(H, dtype=float))
    H_plus = np.atleast_2d(np.asarray(H_plus, dtype=float))
    if H.shape != H_plus.shape or len(H) < 1:
        raise ContractError(f"H {H.shape} and H+ {H_plus.shape} must be equal, non-empty N x p")
    A, _ = _unit_rows(H, "H")
    B, _ = _unit_rows(H_plus, "H+")
    S = (A @ B.T) / tau
    return float(np.mean(_logsumexp(S, axis=1) - np.diag(S)))


class LossTerms(NamedTuple):
    total: float
    ssct: float
    cl: float


def loss_terms(E_src, E_aug, labels, params: ModelParams, hp: Hyperparams, masks=None) -> LossTerms:
    E_src, E_aug, y = _check_batch(E_src, E_aug, labels)
    h, z = _fwd(params, E_src, masks, 0)
    h_aug, z_aug = _fwd(params, E_aug, masks, 1)
    ssct = _ssct_from_logits(z, z_aug, y, hp.alpha)
    cl = info_nce(h, h_aug, hp.tau)
    return LossTerms(ssct + hp.beta * cl, ssct, cl)


def total_loss(E_src, E_aug, labels, params: ModelParams, hp: Hyperparams, masks=None) -> float:
    """SSCT + beta * InfoNCE over the batch (eval mode unless ``masks`` is given)."""
    return loss_terms(E_src, E_aug, labels, params, hp, masks).total


def grad_total_loss(E_src, E_aug, labels, params: ModelParams, hp: Hyperparams, masks=None):
    """Loss terms and the analytic gradient of the total loss w.r.t. every parameter.

    ``masks`` is an optional pair of dropout masks for the source and augmented
    inputs; the gradient is that of the masked forward pass.
    """
    E_src, E_aug, y = _check_batch(E_src, E_aug, labels)
    n = len(y)
    X = E_src if masks is None else E_src * masks[0]
    X_aug = E_aug if masks is None else E_aug * masks[1]
    h = np.tanh(X @ params.W_p + params.b_p)
    h_aug = np.tanh(X_aug @ params.W_p + params.b_p)
    z = h @ params.W_s + params.b_s
    z_aug = h_aug @ params.W_s + params.b_s

    ssct = _ssct_from_logits(z, z_aug, y, hp.alpha)
    onehot = np.eye(N_CLASSES)[y]
    dz = (_softmax(z) - onehot) / n
    dz_aug = hp.alpha * (_softmax(z_aug) - onehot) / n

    dW_s = h.T @ dz + h_aug.T @ dz_aug
    db_s = dz.sum(axis=0) + dz_aug.sum(axis=0)
    dh = dz @ params.W_s.T
    dh_aug = dz_aug @ params.W_s.T

    A, na = _unit_rows(h, "H")
    B, nb = _unit_rows(h_aug, "H+")
    S = (A @ B.T) / hp.tau
    cl = float(np.mean(_logsumexp(S, axis=1) - np.diag(S)))
    if hp.beta != 0:
        dS = hp.beta * (_softmax(S, axis=1) - np.eye(n)) / n
        dA = dS @ B / hp.tau
        dB = dS.T @ A / hp.tau
        # d(x/|x|) applied row-wise: (g - u (u.g)) / |x|
        dh += (dA - A * np.sum(A * dA, axis=1, keepdims=True)) / na[:, None]
        dh_aug += (dB - B * np.sum(B * dB, axis=1, keepdims=True)) / nb[:, None]

    du = dh * (1 - h ** 2)
    du_aug = dh_aug * (1 - h_aug ** 2)
    grads = ModelParams(
        W_p=X.T @ du + X_aug.T @ du_aug,
        b_p=du.sum(axis=0) + du_aug.sum(axis=0),
        W_s=dW_s,
        b_s=db_s,
    )
    return LossTerms(ssct + hp.beta * cl, ssct, cl), grads


@dataclass
class Adam:
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name in PARAM_NAMES:
            g = getattr(grads, name)
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            getattr(params, name)[...] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def predict_index(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(np.atleast_2d(logits), axis=1)


def save_checkpoint(path, params: ModelParams, encoder: dict, hp: Hyperparams | None = None,
                    extra: dict | None = None) -> None:
    doc = {
        "format_version": CHECKPOINT_FORMAT,
        "d": params.d,
        "p": params.p,
        "label_to_index": {str(k): v for k, v in LABEL_TO_INDEX.items()},
        "encoder": encoder,
        "hyperparams": hp.as_dict() if hp else None,
        # row-major flat lists; JSON floats round-trip float64 exactly
        "params": {name: {"shape": list(a.shape), "data": a.ravel(order="C").tolist()}
                   for name, a in params.arrays().items()},
    }
    if extra:
        doc.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc), encoding="utf-8")
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    mapping = {int(k): v for k, v in doc["label_to_index"].items()}
    if mapping != LABEL_TO_INDEX:
        raise ValueError(f"checkpoint label mapping {mapping} differs from {LABEL_TO_INDEX}")
    arrays = {name: np.array(spec["data"], dtype=float).reshape(spec["shape"])
              for name, spec in doc["params"].items()}
    params = ModelParams(**{name: arrays[name] for name in PARAM_NAMES})
    if (params.d, params.p) != (doc["d"], doc["p"]):
        raise ValueError("checkpoint d/p header disagrees with parameter shapes")
    return params, doc


def hyperparams_from_dict(d: dict) -> Hyperparams:
    known = {f.name for f in fields(Hyperparams)}
    return Hyperparams(**{k: v for k, v in d.items() if k in known})
