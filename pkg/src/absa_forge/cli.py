"""absa-forge command line: ingest -> augment -> train -> eval -> sweep."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from absa_forge import corpus as corpus_mod
from absa_forge.augment import AugmentedSample, AugmentSettings, augment_corpus
from absa_forge.config import ConfigError, RunConfig, load_config_file, resolve
from absa_forge.corpus import CorpusError, ParseReport, Triplet, compute_stats, parse_semeval_xml, read_jsonl, write_jsonl
from absa_forge.encoders import HashEncoder, RemoteEncoder, encoder_from_description
from absa_forge.gateway import API_KEY_ENV, Gateway, GatewayError, OpenAIBackend, ResponseCache
from absa_forge.mock import MockBackend, MockScript
from absa_forge.model import load_checkpoint, save_checkpoint
from absa_forge.prompts import DEFAULT_EXEMPLARS
from absa_forge.toy import toy_corpus
from absa_forge.sweep import SweepData, best_row, sweep, write_csv
from absa_forge.train import TrainConfig, TrainingError, evaluate, train

log = logging.getLogger("absa_forge")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad input from the user: missing files, empty inputs, bad config (exit status 2)."""


def _common(p: argparse.ArgumentParser):
    # SUPPRESS so a flag given before the subcommand is not reset by the subparser default
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON run config")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed for all randomness")
    p.add_argument("--verbose", "-v", action="count", default=argparse.SUPPRESS)
    p.add_argument("--print-effective-config", action="store_true", default=argparse.SUPPRESS,
                   help="print the resolved config as JSON and exit")


def _strategy_flags(p):
    p.add_argument("--strategy", choices=["cda", "ada", "cada"], type=str.lower)
    p.add_argument("--verify", action="store_true", default=None, help="re-query until the new aspect differs")


def _hp_flags(p):
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--dropout", dest="dropout_rate", type=float)
    p.add_argument("--proj-dim", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--encoder", dest="encoder_kind", choices=["hash", "remote"])
    p.add_argument("--encoder-endpoint")
    p.add_argument("--encoder-model")
    p.add_argument("--held-out", dest="held_out_fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="absa-forge", description=__doc__)
    _common(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="SemEval-2014 XML -> triplet JSONL")
    _common(p)
    p.add_argument("xml", nargs="?")
    p.add_argument("--domain", default="restaurant")
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--out", "-o")
    p.add_argument("--report", help="write the stats + skip report as JSON")

    p = sub.add_parser("toy", help="write a synthetic keyword corpus as triplet JSONL")
    _common(p)
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--domain", default="restaurant")
    p.add_argument("--embed-dim", type=int, help="hash width the corpus must stay separable under")
    p.add_argument("--out", "-o")

    p = sub.add_parser("augment", help="triplet JSONL -> augmented JSONL")
    _common(p)
    p.add_argument("--triplets")
    p.add_argument("--out", "-o")
    _strategy_flags(p)
    p.add_argument("--max-verify-retries", type=int)
    p.add_argument("--backend", choices=["openai", "mock"])
    p.add_argument("--endpoint", help="base URL of an OpenAI-compatible server")
    p.add_argument("--model")
    p.add_argument("--cache", help="response cache journal (default: <out>.cache.jsonl)")
    p.add_argument("--report")
    p.add_argument("--max-in-flight", type=int)

    p = sub.add_parser("train", help="train the classifier head")
    _common(p)
    p.add_argument("--triplets")
    p.add_argument("--augmented")
    p.add_argument("--monitor", help="external early-stopping triplets (default: held-out fraction)")
    p.add_argument("--checkpoint", "-o")
    p.add_argument("--log", help="epoch log JSONL (default: <checkpoint>.epochs.jsonl)")
    _strategy_flags(p)
    _hp_flags(p)

    p = sub.add_parser("eval", help="accuracy / macro-F1 of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--test")
    p.add_argument("--out", "-o")

    p = sub.add_parser("sweep", help="alpha x beta grid search")
    _common(p)
    p.add_argument("--triplets")
    p.add_argument("--augmented")
    p.add_argument("--test")
    p.add_argument("--out", "-o")
    p.add_argument("--grid-alpha", type=float, nargs="+")
    p.add_argument("--grid-beta", type=float, nargs="+")
    p.add_argument("--workers", type=int)
    _strategy_flags(p)
    _hp_flags(p)
    return parser


_PATH_FLAGS = {
    "xml": "xml", "triplets": "triplets", "augmented": "augmented", "monitor": "monitor",
    "checkpoint": "checkpoint", "log": "log", "test": "test", "out": "out", "cache": "cache",
    "report": "report",
}


def effective_config(args: argparse.Namespace) -> RunConfig:
    ns = vars(args)
    file_cfg = load_config_file(ns.get("config"))
    cli = {}
    for key in ("seed", "strategy", "verify", "backend", "endpoint", "model", "max_verify_retries",
                "max_in_flight", "embed_dim", "held_out_fraction", "grid_alpha", "grid_beta", "workers",
                "alpha", "beta", "tau", "learning_rate", "batch_size", "max_epochs", "patience",
                "dropout_rate", "proj_dim"):
        if ns.get(key) is not None:
            cli[key] = ns[key]
    cli["paths"] = {name: ns.get(flag) for flag, name in _PATH_FLAGS.items()}
    enc_kind = ns.get("encoder_kind")
    if enc_kind or ns.get("encoder_endpoint") or ns.get("encoder_model"):
        enc = dict(file_cfg.get("encoder", {"kind": "hash"}))
        if enc_kind:
            enc["kind"] = enc_kind
        if ns.get("encoder_endpoint"):
            enc["endpoint"] = ns["encoder_endpoint"]
        if ns.get("encoder_model"):
            enc["model"] = ns["encoder_model"]
        file_cfg = {**file_cfg, "encoder": enc}
    return resolve(cli, file_cfg)


def _need(cfg: RunConfig, key: str, what: str, must_exist: bool = True) -> Path:
    value = cfg.paths.get(key)
    if not value:
        raise UsageError(f"missing {what} (--{key} or paths.{key} in the config)")
    path = Path(value)
    if must_exist and not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _read_triplets(path: Path) -> list[Triplet]:
    try:
        return read_jsonl(path, Triplet)
    except CorpusError as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_ingest(cfg: RunConfig, args) -> int:
    xml_path = _need(cfg, "xml", "input XML")
    report = ParseReport()
    try:
        triplets = parse_semeval_xml(xml_path.read_bytes(), args.domain, report)
    except corpus_mod.XMLParseError as exc:
        print(f"error: {xml_path}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    stats = compute_stats(triplets, args.split)
    out = cfg.paths.get("out")
    if out:
        write_jsonl(triplets, out)
    print(stats.line())
    print(f"skipped_conflict={report.skipped_conflict} invalid={report.n_invalid} triplets={len(triplets)}")
    if cfg.paths.get("report"):
        _write_json(cfg.paths["report"], {"seed": cfg.seed, "stats": stats.as_dict(), "skips": report.as_dict()})
    return EXIT_OK


def cmd_toy(cfg: RunConfig, args) -> int:
    out = _need(cfg, "out", "output path", must_exist=False)
    if args.n < 1:
        raise UsageError("--n must be positive")
    triplets = toy_corpus(args.n, seed=cfg.seed, domain=args.domain, d=cfg.embed_dim, hash_seed=cfg.seed)
    write_jsonl(triplets, out)
    print(compute_stats(triplets, "train").line())
    return EXIT_OK


def make_gateway(cfg: RunConfig, cache_path) -> Gateway:
    if cfg.backend == "mock":
        backend = MockBackend(MockScript.from_dict(cfg.mock), seed=cfg.seed)
    else:
        if not os.environ.get(API_KEY_ENV):
            raise UsageError(f"backend 'openai' needs the {API_KEY_ENV} environment variable")
        backend = OpenAIBackend(cfg.endpoint)
    return Gateway(backend, ResponseCache(cache_path), max_in_flight=cfg.max_in_flight, jitter_seed=cfg.seed)


def cmd_augment(cfg: RunConfig, args) -> int:
    src = _need(cfg, "triplets", "triplet JSONL")
    out = _need(cfg, "out", "output path", must_exist=False)
    triplets = _read_triplets(src)
    cache = cfg.paths.get("cache") or str(out) + ".cache.jsonl"
    gateway = make_gateway(cfg, cache)
    settings = AugmentSettings(
        model=cfg.model,
        exemplars=DEFAULT_EXEMPLARS,
        max_verify_retries=cfg.max_verify_retries,
        max_aug_retries=cfg.max_aug_retries,
        max_transport_retries=cfg.max_transport_retries,
    )
    strategy = cfg.strategy_obj
    samples, report = augment_corpus(triplets, gateway, strategy, settings, cfg.exemplar_pairs() or None)
    write_jsonl(samples, out)
    summary = {"seed": cfg.seed, "strategy": strategy.kind, "verify": strategy.verify,
               "backend": cfg.backend, **report.as_dict()}
    report_path = cfg.paths.get("report") or str(out) + ".report.json"
    _write_json(report_path, summary)
    print(f"augmented={report.n} fallbacks={report.fallbacks} mean_retries={report.mean_retries:.3f} "
          f"distinct_rate={report.distinct_rate:.3f} dropped={len(report.dropped)}")
    return EXIT_OK


def make_encoder(cfg: RunConfig):
    enc = cfg.encoder
    if enc.get("kind", "hash") == "hash":
        return HashEncoder(cfg.embed_dim, cfg.seed)
    for key in ("endpoint", "model"):
        if not enc.get(key):
            raise UsageError(f"remote encoder needs encoder.{key}")
    return RemoteEncoder(enc["endpoint"], enc["model"], int(enc.get("d", cfg.embed_dim)))


def _train_inputs(cfg: RunConfig):
    triplets = _read_triplets(_need(cfg, "triplets", "triplet JSONL"))
    aug_path = _need(cfg, "augmented", "augmented JSONL")
    try:
        augmented = read_jsonl(aug_path, AugmentedSample)
    except CorpusError as exc:
        raise UsageError(f"{aug_path}: {exc}") from None
    if not triplets or not augmented:
        raise UsageError("training needs non-empty triplet and augmented files")
    return triplets, augmented


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(hyperparams=cfg.hp(), strategy=cfg.strategy_obj,
                       held_out_fraction=cfg.held_out_fraction, embed_dim=cfg.embed_dim)


def cmd_train(cfg: RunConfig, args) -> int:
    triplets, augmented = _train_inputs(cfg)
    ckpt = _need(cfg, "checkpoint", "checkpoint path", must_exist=False)
    monitor = _read_triplets(_need(cfg, "monitor", "monitor JSONL")) if cfg.paths.get("monitor") else None
    encoder = make_encoder(cfg)
    tcfg = _train_config(cfg)
    params, history = train(triplets, augmented, tcfg, encoder=encoder, monitor=monitor)
    save_checkpoint(ckpt, params, encoder.describe(), tcfg.hyperparams,
                    extra={"seed": cfg.seed, "strategy": tcfg.strategy.name})
    log_path = cfg.paths.get("log") or str(ckpt) + ".epochs.jsonl"
    write_jsonl([r.as_dict() for r in history], log_path)
    best = max(history, key=lambda r: r.monitor_accuracy)
    hp = tcfg.hyperparams
    print(f"alpha={hp.alpha} beta={hp.beta} epochs={len(history)} best_epoch={best.epoch} "
          f"monitor_accuracy={best.monitor_accuracy:.4f} monitor_macro_f1={best.monitor_macro_f1:.4f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    ckpt = _need(cfg, "checkpoint", "checkpoint")
    test = _read_triplets(_need(cfg, "test", "test JSONL"))
    if not test:
        raise UsageError(f"test file {cfg.paths['test']} contains no triplets")
    params, doc = load_checkpoint(ckpt)
    encoder = encoder_from_description(doc["encoder"])
    m = evaluate(params, encoder, test)
    result = {**m.as_dict(), "seed": doc.get("seed", cfg.seed)}
    if cfg.paths.get("out"):
        _write_json(cfg.paths["out"], result)
    print(f"accuracy={m.accuracy:.4f} macro_f1={m.macro_f1:.4f} n_test={len(test)}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    triplets, augmented = _train_inputs(cfg)
    out = _need(cfg, "out", "output CSV path", must_exist=False)
    test = _read_triplets(_need(cfg, "test", "test JSONL")) if cfg.paths.get("test") else None
    data = SweepData(triplets, augmented, test, make_encoder(cfg))
    rows = sweep(cfg.grid_alpha, cfg.grid_beta, _train_config(cfg), data, workers=cfg.workers)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out)
    best = best_row(rows)
    _write_json(str(out) + ".meta.json", {
        "seed": cfg.seed,
        "best": best.__dict__ if best else None,
        "errors": [{"alpha": r.alpha, "beta": r.beta, "error": r.error} for r in rows if r.error],
    })
    if best:
        print(f"rows={len(rows)} best alpha={best.alpha} beta={best.beta} "
              f"accuracy={best.accuracy:.4f} macro_f1={best.macro_f1:.4f}")
    else:
        print(f"rows={len(rows)} all runs failed")
    return EXIT_OK if best else EXIT_FAIL


COMMANDS = {"ingest": cmd_ingest, "toy": cmd_toy, "augment": cmd_augment, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    verbose = getattr(args, "verbose", 0) or 0
    logging.basicConfig(level=logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        if getattr(args, "print_effective_config", False):
            print(json.dumps(cfg.as_dict(), indent=2, sort_keys=True))
            return EXIT_OK
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GatewayError, TrainingError, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
