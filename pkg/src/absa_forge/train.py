"""Mini-batch training with early stopping, prediction and metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from absa_forge.augment import AugmentedSample, Strategy
from absa_forge.corpus import Triplet
from absa_forge.encoders import HashEncoder
from absa_forge.model import (
    INDEX_TO_LABEL,
    N_CLASSES,
    Adam,
    ContractError,
    Hyperparams,
    ModelParams,
    dropout_mask,
    forward,
    grad_total_loss,
    labels_to_index,
    predict_index,
)

log = logging.getLogger(__name__)

# Best (alpha, beta) per augmentation strategy, as tuned for the BERT runs.
STRATEGY_DEFAULTS = {
    "CDA": (0.2, 0.2),
    "ADA": (0.6, 0.5),
    "ADA-veri": (0.1, 0.2),
    "CADA": (0.2, 0.4),
    "CADA-veri": (0.4, 0.6),
}


def strategy_defaults(strategy: Strategy) -> tuple[float, float]:
    return STRATEGY_DEFAULTS[strategy.name]


class TrainingError(Exception):
    pass


@dataclass
class TrainConfig:
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    strategy: Strategy = field(default_factory=lambda: Strategy("CADA"))
    # fraction of pairs held out for early stopping; None means an external monitor set is supplied
    held_out_fraction: float | None = 0.1
    shuffle_seed: int | None = None
    embed_dim: int = 512

    def __post_init__(self):
        f = self.held_out_fraction
        if f is not None and not 0 < f <= 0.5:
            raise ValueError(f"held_out_fraction must be in (0, 0.5], got {f}")

    @property
    def seed(self) -> int:
        return self.hyperparams.seed if self.shuffle_seed is None else self.shuffle_seed


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    ssct: float
    cl: float
    monitor_accuracy: float
    monitor_macro_f1: float
    best: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class Metrics(NamedTuple):
    accuracy: float
    macro_f1: float
    confusion: np.ndarray

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "confusion": self.confusion.tolist(),
            "n_test": int(self.confusion.sum()),
        }


def confusion_matrix(gold_idx, pred_idx) -> np.ndarray:
    """Rows are gold classes, columns predicted classes (index order negative, neutral, positive)."""
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(cm, (np.asarray(gold_idx, dtype=np.int64), np.asarray(pred_idx, dtype=np.int64)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> Metrics:
    total = cm.sum()
    if total == 0:
        raise ValueError("cannot compute metrics on an empty set")
    tp = np.diag(cm).astype(float)
    pred_totals = cm.sum(axis=0)
    gold_totals = cm.sum(axis=1)
    f1 = np.zeros(N_CLASSES)
    for k in range(N_CLASSES):
        denom = pred_totals[k] + gold_totals[k]
        # F1 = 2PR/(P+R) = 2TP/(pred+gold); 0/0 is scored as 0
        f1[k] = 2 * tp[k] / denom if denom else 0.0
    return Metrics(float(tp.sum() / total), float(f1.mean()), cm)


def _predict_embedded(params: ModelParams, E: np.ndarray) -> np.ndarray:
    _, logits = forward(params, E)
    return predict_index(logits)


def predict(params: ModelParams, encoder, t: Triplet) -> int:
    """Polarity with the highest eval-mode logit; ties go to the lowest class index."""
    _, logits = forward(params, encoder.encode(t.sentence, t.aspect))
    return INDEX_TO_LABEL[int(predict_index(logits)[0])]


def evaluate(params: ModelParams, encoder, test: Sequence[Triplet]) -> Metrics:
    if not test:
        raise ValueError("empty test set")
    E = encoder.encode_many((t.sentence, t.aspect) for t in test)
    gold = labels_to_index([t.polarity for t in test])
    return metrics_from_confusion(confusion_matrix(gold, _predict_embedded(params, E)))


def pair_up(corpus: Sequence[Triplet], augmented: Sequence[AugmentedSample]) -> list[tuple[Triplet, AugmentedSample]]:
    by_id = {t.id: t for t in corpus}
    missing = [a.source_id for a in augmented if a.source_id not in by_id]
    if missing:
        raise TrainingError(f"{len(missing)} augmented samples have no source triplet, e.g. {missing[0]!r}")
    pairs = [(by_id[a.source_id], a) for a in augmented]
    unpaired = len(set(by_id) - {a.source_id for a in augmented})
    if unpaired:
        log.warning("%d corpus triplets have no augmentation and are not trained on", unpaired)
    return pairs


def mean_alignment(params: ModelParams, E_src: np.ndarray, E_aug: np.ndarray) -> float:
    """Mean cosine between each source representation and its own augmentation (eval mode)."""
    h, _ = forward(params, E_src)
    h_aug, _ = forward(params, E_aug)
    num = np.sum(h * h_aug, axis=1)
    den = np.linalg.norm(h, axis=1) * np.linalg.norm(h_aug, axis=1)
    return float(np.mean(num / den))


def encode_pairs(encoder, pairs):
    E_src = encoder.encode_many((t.sentence, t.aspect) for t, _ in pairs)
    E_aug = encoder.encode_many((a.aug_sentence, a.aug_aspect) for _, a in pairs)
    return E_src, E_aug


def split_monitor(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    k = max(1, int(round(fraction * n)))
    if k >= n:
        raise TrainingError(f"held-out fraction {fraction} leaves no training data out of {n} pairs")
    return np.sort(order[k:]), np.sort(order[:k])


def init_params(d: int, hp: Hyperparams) -> ModelParams:
    return ModelParams.init(d, hp.proj_dim, hp.seed)


def train(
    corpus: Sequence[Triplet],
    augmented: Sequence[AugmentedSample],
    cfg: TrainConfig,
    encoder=None,
    monitor: Sequence[Triplet] | None = None,
) -> tuple[ModelParams, list[EpochRecord]]:
    """Train the head on (source, augmentation) pairs; returns the best-monitor params and the epoch log.

    Early stopping watches monitor accuracy: training ends after ``patience``
    epochs without a strict improvement, or at ``max_epochs``.
    """
    hp = cfg.hyperparams
    encoder = encoder or HashEncoder(cfg.embed_dim, hp.seed)
    pairs = pair_up(corpus, augmented)
    if not pairs:
        raise TrainingError("nothing to train on")
    E_src, E_aug = encode_pairs(encoder, pairs)
    labels = np.array([t.polarity for t, _ in pairs])
    ids = [t.id for t, _ in pairs]

    if monitor is not None:
        if not monitor:
            raise TrainingError("monitor set is empty")
        train_idx = np.arange(len(pairs))
        train_ids = {t.id for t, _ in pairs}
        if any(m.id in train_ids for m in monitor):
            raise TrainingError("monitor set overlaps the training data")
        E_mon = encoder.encode_many((t.sentence, t.aspect) for t in monitor)
        y_mon = labels_to_index([t.polarity for t in monitor])
    elif cfg.held_out_fraction is not None:
        train_idx, mon_idx = split_monitor(len(pairs), cfg.held_out_fraction, cfg.seed)
        # every augmentation of a held-out source leaves training too
        held_sources = {ids[i] for i in mon_idx}
        train_idx = np.array([i for i in train_idx if ids[i] not in held_sources], dtype=np.int64)
        mon_first = {}
        for i in mon_idx:
            mon_first.setdefault(ids[i], i)
        mon_idx = np.array(sorted(mon_first.values()), dtype=np.int64)
        E_mon, y_mon = E_src[mon_idx], labels_to_index(labels[mon_idx])
    else:
        raise TrainingError("no monitor split: pass monitor triplets or set held_out_fraction")

    params = init_params(encoder.d, hp)
    opt = Adam(lr=hp.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    best_params, best_acc = params.copy(), -math.inf
    since_best = 0
    history: list[EpochRecord] = []

    for epoch in range(1, hp.max_epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(order), hp.batch_size):
            b = order[start:start + hp.batch_size]
            shape = (len(b), E_src.shape[1])
            masks = (dropout_mask(rng, shape, hp.dropout_rate), dropout_mask(rng, shape, hp.dropout_rate))
            try:
                terms, grads = grad_total_loss(E_src[b], E_aug[b], labels[b], params, hp, masks)
                finite = all(math.isfinite(x) for x in terms) and grads.all_finite()
            except ContractError:
                finite = False
            if not finite:
                raise TrainingError(f"non-finite loss in epoch {epoch}, batch ids {[ids[i] for i in b]}")
            opt.step(params, grads)
            sums += terms
            n_batches += 1
        loss, ssct, cl = sums / n_batches

        m = metrics_from_confusion(confusion_matrix(y_mon, _predict_embedded(params, E_mon)))
        improved = m.accuracy > best_acc
        if improved:
            best_acc, best_params, since_best = m.accuracy, params.copy(), 0
        else:
            since_best += 1
        # keep total == ssct + beta * cl exact at logging time despite summation order
        history.append(EpochRecord(epoch, ssct + hp.beta * cl, ssct, cl, m.accuracy, m.macro_f1, improved))
        log.debug("epoch %d loss=%.4f acc=%.4f f1=%.4f%s", epoch, loss, m.accuracy, m.macro_f1,
                  " *" if improved else "")
        if since_best >= hp.patience:
            break
    return best_params, history

