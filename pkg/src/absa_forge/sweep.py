"""Grid search over (alpha, beta) with CSV output."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from absa_forge.augment import AugmentedSample
from absa_forge.corpus import Triplet
from absa_forge.encoders import HashEncoder
from absa_forge.train import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))
CSV_HEADER = ("alpha", "beta", "accuracy", "macro_f1", "epochs_run")


@dataclass
class SweepData:
    corpus: Sequence[Triplet]
    augmented: Sequence[AugmentedSample]
    test: Sequence[Triplet] | None = None
    encoder: object | None = None


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    beta: float
    accuracy: float
    macro_f1: float
    epochs_run: int
    error: str | None = None


def run_point(alpha: float, beta: float, base_cfg: TrainConfig, data: SweepData) -> SweepRow:
    try:
        hp = dataclasses.replace(base_cfg.hyperparams, alpha=alpha, beta=beta)
        cfg = dataclasses.replace(base_cfg, hyperparams=hp)
        params, history = train(data.corpus, data.augmented, cfg, encoder=data.encoder)
        if data.test:
            enc = data.encoder or HashEncoder(cfg.embed_dim, hp.seed)
            m = evaluate(params, enc, data.test)
            acc, f1 = m.accuracy, m.macro_f1
        else:
            best = max(history, key=lambda r: r.monitor_accuracy)
            acc, f1 = best.monitor_accuracy, best.monitor_macro_f1
        return SweepRow(alpha, beta, acc, f1, len(history))
    except Exception as exc:  # one bad grid point must not sink the sweep
        log.warning("sweep point alpha=%s beta=%s failed: %s", alpha, beta, exc)
        return SweepRow(alpha, beta, math.nan, math.nan, 0, f"{type(exc).__name__}: {exc}")


def _run_point_star(args):
    return run_point(*args)


def sweep(
    grid_alpha: Sequence[float],
    grid_beta: Sequence[float],
    base_cfg: TrainConfig,
    data: SweepData,
    workers: int = 1,
) -> list[SweepRow]:
    """Train one model per (alpha, beta) with the same seed; rows ordered by (alpha, beta)."""
    if not grid_alpha or not grid_beta:
        raise ValueError("grids must be non-empty")
    points = [(a, b) for a in sorted(grid_alpha) for b in sorted(grid_beta)]
    jobs = [(a, b, base_cfg, data) for a, b in points]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_point_star, jobs))
    return [run_point(*job) for job in jobs]


def best_row(rows: Sequence[SweepRow]) -> SweepRow | None:
    ok = [r for r in rows if r.error is None]
    if not ok:
        return None
    # max() keeps the first of equal keys, i.e. the smallest (alpha, beta)
    return max(ok, key=lambda r: (r.accuracy, r.macro_f1))


def write_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([repr(r.alpha), repr(r.beta), repr(r.accuracy), repr(r.macro_f1), r.epochs_run])


def read_csv(path) -> list[SweepRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"unexpected sweep CSV header {reader.fieldnames}")
        return [
            SweepRow(float(r["alpha"]), float(r["beta"]), float(r["accuracy"]), float(r["macro_f1"]),
                     int(r["epochs_run"]))
            for r in reader
        ]
