"""Acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; the lines are printed in the terminal
summary (see conftest.py) and by running this file directly.

Set ABSA_FORGE_SEMEVAL_DIR to a directory holding the SemEval-2014 Restaurant
and Laptop train/test XML files to check the full-corpus counts; otherwise
criterion 1 runs on the bundled hand-counted fixture.
"""

import itertools
import json
import math
import os
import sys
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import pytest

from absa_forge.augment import Strategy, augment_ada, augment_cada, augment_cda, augment_corpus
from absa_forge.cli import main
from absa_forge.corpus import Triplet, read_jsonl
from absa_forge.encoders import HashEncoder, hash_embed
from absa_forge.gateway import API_KEY_ENV, Gateway, PromptRequest
from absa_forge.mock import MockBackend, MockScript, mock_respond
from absa_forge.model import (
    Hyperparams,
    ModelParams,
    ce_loss,
    grad_total_loss,
    info_nce,
    load_checkpoint,
    ssct_loss,
    total_loss,
)
from absa_forge.prompts import build_ada_prompt, build_cda_prompt
from absa_forge.sweep import DEFAULT_GRID, SweepData, sweep
from absa_forge.toy import toy_corpus
from absa_forge.train import (
    TrainConfig,
    encode_pairs,
    evaluate,
    init_params,
    mean_alignment,
    pair_up,
    train,
)

from conftest import FIXTURES
from oracles import finite_diff, rel_err
from test_prompts import GOLDEN_ADA_SPEED, GOLDEN_CDA_SPEED

RESULTS: dict[int, str] = {}

SPEED = "The speed is incredible and I am more than satisfied."
ROW_CDA = "The speed is extraordinary and I am more than content."
ROW_ADA = "The performance is incredible and i am more than satisfied."
ROW_CADA = "The performance is extraordinary and I am more than content."

# hand counts for tests/fixtures/restaurant_fixture.xml
FIXTURE_COUNTS = {"positive": 19, "neutral": 7, "negative": 9}
FULL_COUNTS = {
    ("restaurant", "train"): (2164, 637, 807),
    ("restaurant", "test"): (728, 196, 196),
    ("laptop", "train"): (994, 464, 870),
    ("laptop", "test"): (341, 169, 128),
}


def record(n: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    assert ok, RESULTS[n]


def _stats_line(capsys, xml: Path, domain: str, split: str) -> str:
    assert main(["ingest", str(xml), "--domain", domain, "--split", split]) == 0
    return capsys.readouterr().out.splitlines()[0]


def _find_semeval(root: Path, domain: str, split: str) -> Path | None:
    prefix = {"restaurant": "restaurant", "laptop": "laptop"}[domain]
    for p in sorted(root.glob("*.xml")):
        name = p.name.lower()
        if name.startswith(prefix) and split in name:
            return p
    return None


def test_criterion_1_corpus_statistics(capsys):
    root = os.environ.get("ABSA_FORGE_SEMEVAL_DIR")
    start = time.perf_counter()
    if root:
        mismatches = []
        for (domain, split), (pos, neu, neg) in FULL_COUNTS.items():
            xml = _find_semeval(Path(root), domain, split)
            if xml is None:
                mismatches.append(f"{domain}/{split}: file missing")
                continue
            line = _stats_line(capsys, xml, domain, split)
            if line != f"positive={pos} neutral={neu} negative={neg}":
                mismatches.append(f"{domain}/{split}: {line}")
        elapsed = time.perf_counter() - start
        ok = not mismatches and elapsed < 5
        detail = f"12 counts over 4 SemEval files in {elapsed:.2f}s" + (f"; {mismatches}" if mismatches else "")
    else:
        line = _stats_line(capsys, FIXTURES / "restaurant_fixture.xml", "restaurant", "train")
        expected = " ".join(f"{k}={v}" for k, v in FIXTURE_COUNTS.items())
        elapsed = time.perf_counter() - start
        ok = line == expected and elapsed < 5
        detail = f"SemEval files not provided, fixture gives '{line}' (expected '{expected}') in {elapsed:.3f}s"
    record(1, "corpus statistics", ok, detail)


def test_criterion_2_prompt_fidelity():
    cda = build_cda_prompt(SPEED, "speed")
    ada = build_ada_prompt(SPEED, "speed")
    ok = (
        cda.encode("utf-8") == GOLDEN_CDA_SPEED.encode("utf-8")
        and ada.encode("utf-8") == GOLDEN_ADA_SPEED.encode("utf-8")
        and cda.endswith("Please only output the New sentence.")
        and ada.endswith("Please only output the new aspect term.")
    )
    record(2, "prompt fidelity", ok, f"CDA prompt {len(cda)} chars, ADA prompt {len(ada)} chars, byte-exact goldens")


def test_criterion_3_table_rows_round_trip():
    src = Triplet("lap1#0", SPEED, "speed", 4, 9, 1, "laptop")
    # the printed ADA row lowercases "I"; a source carrying that lowercase form reproduces it exactly
    src_lower = Triplet("lap1#1", SPEED.replace(" I am", " i am"), "speed", 4, 9, 1, "laptop")
    script = MockScript(
        canned_cda={SPEED: [ROW_CDA]},
        canned_ada={SPEED: ["performance"], src_lower.sentence: ["performance"]},
    )
    g = Gateway(MockBackend(script))
    cda = augment_cda(src, g).aug_sentence
    ada_exact = augment_ada(src_lower, g).aug_sentence
    ada_printed = augment_ada(src, g)
    cada = augment_cada(src, g).aug_sentence
    ok = (
        cda == ROW_CDA
        and ada_exact == ROW_ADA
        and ada_printed.aug_aspect == "performance"
        and ada_printed.aug_sentence == ROW_ADA.replace(" i am", " I am")
        and cada == ROW_CADA
    )
    record(3, "example rows round-trip", ok,
           "CDA, ADA ('performance') and CADA rows byte-exact; ADA from the capitalised source differs only in 'I'")


def test_criterion_4_verification_loop():
    src = Triplet("lap1#0", SPEED, "speed", 4, 9, 1, "laptop")
    be1 = MockBackend(MockScript(canned_ada={SPEED: ["speed", "performance"]}))
    a = augment_ada(src, Gateway(be1), verify=True)
    be2 = MockBackend(MockScript(canned_ada={SPEED: ["speed"]}))
    b = augment_ada(src, Gateway(be2), verify=True, max_verify_retries=3)
    ok = (
        (a.retries_used, a.verified_distinct, len(be1.calls)) == (1, True, 2)
        and (b.retries_used, b.verified_distinct, len(be2.calls)) == (3, False, 4)
    )
    record(4, "verification loop", ok,
           f"repeat-then-distinct: retries={a.retries_used} distinct={a.verified_distinct}; "
           f"always-repeat cap 3: retries={b.retries_used} distinct={b.verified_distinct} calls={len(be2.calls)}")


def test_criterion_5_loss_identities():
    rng = np.random.default_rng(0)
    H = rng.normal(size=(1, 6))
    single = info_nce(H, rng.normal(size=(1, 6)), 0.08)
    n = 7
    row = rng.normal(size=(1, 6))
    identical = info_nce(np.repeat(row, n, 0), np.repeat(row * 3.0, n, 0), 0.08)
    uniform = ce_loss(np.zeros(3), 0)
    params = ModelParams.init(16, 8, seed=1)
    E, Ea = rng.normal(size=(5, 16)), rng.normal(size=(5, 16))
    y = [1, 0, -1, 1, 0]
    t_b0 = total_loss(E, Ea, y, params, Hyperparams(alpha=0.3, beta=0.0))
    s = ssct_loss(E, Ea, y, params, 0.3)
    A, B = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    scales_a, scales_b = rng.uniform(0.1, 10, (6, 1)), rng.uniform(0.1, 10, (6, 1))
    scale_gap = abs(info_nce(A, B, 0.08) - info_nce(A * scales_a, B * scales_b, 0.08))
    ok = (
        single == 0.0
        and abs(identical - math.log(n)) <= 1e-9
        and abs(uniform - math.log(3)) <= 1e-9
        and t_b0 == s
        and scale_gap <= 1e-9
    )
    record(5, "loss identities", ok,
           f"N=1 -> {single}; identical rows |d|={abs(identical - math.log(n)):.1e}; "
           f"uniform CE |d|={abs(uniform - math.log(3)):.1e}; beta=0 bitwise {t_b0 == s}; scale gap {scale_gap:.1e}")


def test_criterion_6_gradient_check():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        for alpha, beta in itertools.product((0.0, 0.2, 0.6), (0.0, 0.4, 1.0)):
            rng = np.random.default_rng(seed)
            p = ModelParams(rng.normal(0, 0.5, (16, 8)), rng.normal(0, 0.1, 8),
                            rng.normal(0, 0.5, (8, 3)), rng.normal(0, 0.1, 3))
            E, Ea = rng.normal(size=(4, 16)), rng.normal(size=(4, 16))
            y = list(rng.choice([-1, 0, 1], size=4))
            hp = Hyperparams(alpha=alpha, beta=beta)
            _, g = grad_total_loss(E, Ea, y, p, hp)
            num = finite_diff(lambda: total_loss(E, Ea, y, p, hp), p, step=1e-5)
            worst = max(worst, max(rel_err(getattr(g, k), num[k]) for k in num))
    elapsed = time.perf_counter() - start
    record(6, "gradient check", worst < 1e-4 and elapsed < 60,
           f"900 checks (100 seeds x 9 alpha/beta), worst relative error {worst:.2e}, {elapsed:.1f}s")


# desk-scale settings: loss weights are the CADA defaults; the optimiser step is
# raised from the BERT fine-tuning value so the linear head converges in 200 epochs
DESK_D = 512
DESK_LR = 3e-3


def _toy_run(corpus, aug, enc):
    hp = Hyperparams(alpha=0.2, beta=0.4, learning_rate=DESK_LR, max_epochs=200)
    return train(corpus, aug, TrainConfig(hyperparams=hp, embed_dim=DESK_D), enc), hp


def test_criterion_7_desk_scale_training():
    enc = HashEncoder(DESK_D, 0)
    corpus = toy_corpus(300, seed=0, d=DESK_D, hash_seed=0)
    aug, _ = augment_corpus(corpus, Gateway(MockBackend(seed=0)), Strategy("CADA"))
    (params, history), hp = _toy_run(corpus, aug, enc)
    (params2, history2), _ = _toy_run(corpus, aug, enc)
    acc = evaluate(params, enc, corpus).accuracy
    E_src, E_aug = encode_pairs(enc, pair_up(corpus, aug))
    align0 = mean_alignment(init_params(DESK_D, hp), E_src, E_aug)
    align = mean_alignment(params, E_src, E_aug)
    deterministic = history == history2 and all(
        np.array_equal(a, b) for a, b in zip(params.arrays(), params2.arrays()))
    ok = acc >= 0.95 and len(history) <= 200 and deterministic and align >= align0
    record(7, "desk-scale training", ok,
           f"train accuracy {acc:.4f} after {len(history)} epochs, deterministic={deterministic}, "
           f"alignment {align0:.3f} -> {align:.3f}")


def test_criterion_8_sweep_harness():
    enc = HashEncoder(DESK_D, 0)
    corpus = toy_corpus(50, seed=0, d=DESK_D, hash_seed=0)
    aug, _ = augment_corpus(corpus, Gateway(MockBackend(seed=0)), Strategy("CADA"))
    data = SweepData(corpus, aug, encoder=enc)
    cfg = TrainConfig(hyperparams=Hyperparams(learning_rate=DESK_LR), embed_dim=DESK_D)
    start = time.perf_counter()
    first = sweep(DEFAULT_GRID, DEFAULT_GRID, cfg, data)
    second = sweep(DEFAULT_GRID, DEFAULT_GRID, cfg, data, workers=4)
    elapsed = time.perf_counter() - start
    pairs = {(r.alpha, r.beta) for r in first}
    ok = (len(first) == 100 and len(pairs) == 100 and first == second
          and all(r.error is None for r in first) and elapsed < 600)
    record(8, "sweep harness", ok,
           f"{len(first)} rows, {len(pairs)} distinct (alpha, beta), serial == 4 workers: {first == second}, "
           f"two sweeps in {elapsed:.1f}s")


class _FakeOpenAI(BaseHTTPRequestHandler):
    """Local stand-in for a chat-completions + embeddings server."""

    dim = 64

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        if self.path == "/v1/chat/completions":
            req = PromptRequest(tuple((m["role"], m["content"]) for m in body["messages"]),
                                model=body["model"], temperature=body["temperature"])
            text = mock_respond(req, MockScript(), seed=0)
            doc = {"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}
        elif self.path == "/v1/embeddings":
            doc = {"data": [{"index": i, "embedding": hash_embed(t, self.dim, 9).tolist()}
                            for i, t in enumerate(body["input"])]}
        else:
            self.send_error(404)
            return
        payload = json.dumps(doc).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def fake_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _FakeOpenAI)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    server.server_close()


def test_criterion_9_full_scale_path(tmp_path, capsys, monkeypatch, fake_server):
    # absolute benchmark scores need BERT fine-tuning and a live LLM, so none are asserted;
    # this drives the remote gateway + remote encoder path of the CLI against a local server
    monkeypatch.setenv(API_KEY_ENV, "test-key")
    toy, aug, ckpt, metrics = (tmp_path / n for n in ("toy.jsonl", "aug.jsonl", "m.json", "metrics.json"))
    steps = [
        main(["toy", "--n", "30", "-o", str(toy)]),
        main(["augment", "--triplets", str(toy), "-o", str(aug), "--strategy", "cada",
              "--backend", "openai", "--endpoint", fake_server]),
        main(["train", "--triplets", str(toy), "--augmented", str(aug), "-o", str(ckpt),
              "--encoder", "remote", "--encoder-endpoint", fake_server, "--encoder-model", "stub",
              "--embed-dim", str(_FakeOpenAI.dim), "--epochs", "5", "--patience", "5"]),
        main(["eval", "--checkpoint", str(ckpt), "--test", str(toy), "-o", str(metrics)]),
    ]
    capsys.readouterr()
    _, doc = load_checkpoint(ckpt) if ckpt.exists() else (None, {})
    samples = read_jsonl(aug, None) if aug.exists() else []
    readme = (Path(__file__).parent.parent / "README.md").read_text(encoding="utf-8")
    ok = (
        steps == [0, 0, 0, 0]
        and len(samples) == 30
        and doc.get("encoder", {}).get("kind") == "remote"
        and "n_test" in json.loads(metrics.read_text())
        and "Full-scale runs" in readme
    )
    record(9, "full-scale path declared", ok,
           f"CLI exit codes {steps} over a local OpenAI-compatible server; benchmark scores out of scope "
           "and documented in the README")


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
