"""Acceptance suite: one printed PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the verdict lines
are also repeated in the terminal summary. Tolerances are pinned below and
must not be loosened.
"""

import math
import time

import numpy as np
import pytest

from peter import autodiff as ad
from peter.autodiff import MASK_SENTINEL, Tensor
from peter.cli import cmd_ablate, cmd_generate, cmd_train
from peter.config import RunConfig
from peter.corpus import (
    SplitSpec,
    build_vocab,
    collate,
    encode_sample,
    split,
    synth_generate,
)
from peter.evaluation import bleu_n, div, fcr, fmr, rmse_mae, rouge_n, usr
from peter.model import PeterConfig, build_mask, embed_sequence, forward, forward_batch, init_params, load_checkpoint, save_checkpoint
from peter.training import LossBreakdown, TrainSchedule, objective, train

import test_evaluation as oracles

GRAD_TOL = 1e-4
GRAD_BUDGET_S = 120.0
METRIC_TOL = 1e-9
N_METRIC_CORPORA = 40
RMSE_MARGIN = 1.05
REPRO_BUDGET_S = 15 * 60

# the fixed synthetic corpus shared by the behavioural criteria
SEED = 7
CORPUS = dict(synth=True, synth_users=50, synth_items=50, synth_features=20, synth_records_per_user=50, seed=SEED)
SMALL_MODEL = dict(d=64, ffn_dim=256, n_layers=2, n_heads=2, word_budget=15, vocab_cap=500, max_epochs=30)


def corpus_run_config(tmp_path, **kw) -> RunConfig:
    return RunConfig(**{**CORPUS, **SMALL_MODEL, "out": str(tmp_path), **kw})


# ---------------------------------------------------------------- 1. gradients


def test_gradient_correctness(criterion):
    with criterion("Gradient correctness (d=16, L=2, H=2, |V|=50, 2 samples)") as c:
        t0 = time.perf_counter()
        recs = synth_generate(8, 8, 20, 10, seed=1)
        vocab = build_vocab(recs, cap=46)  # 46 words + 4 specials
        if len(vocab.words) != 50:
            raise ValueError(f"toy vocabulary has {len(vocab.words)} entries, expected 50")
        cfg = PeterConfig(d=16, ffn_dim=32, n_layers=2, n_heads=2, word_budget=6)
        params = init_params(cfg, len(vocab.users), len(vocab.items), len(vocab.words), seed=3)
        batch = collate([encode_sample(r, vocab, False, cfg.word_budget) for r in recs[:2]])

        def J():
            with ad.no_grad():
                return objective(forward_batch(params, batch, vocab.pad), batch, cfg)[1].J

        j, _ = objective(forward_batch(params, batch, vocab.pad), batch, cfg)
        ad.backward(j)
        worst, worst_name, h = 0.0, "", 1e-5
        for name, t in params.tensors.items():
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            numeric = np.zeros_like(t.data)
            it = np.nditer(t.data, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                old = t.data[i]
                t.data[i] = old + h
                a = J()
                t.data[i] = old - h
                b = J()
                t.data[i] = old
                numeric[i] = (a - b) / (2 * h)
            # tensor-wise relative error; a floor keeps all-zero gradients well defined
            err = float(np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-8))
            if err > worst:
                worst, worst_name = err, name
        elapsed = time.perf_counter() - t0
        c.check(
            worst <= GRAD_TOL and elapsed < GRAD_BUDGET_S,
            f"worst rel err {worst:.2e} ({worst_name}) <= {GRAD_TOL:g}; {len(params.tensors)} tensors in {elapsed:.0f}s",
        )


# ---------------------------------------------------------------- 2. mask oracle


def test_mask_oracle(criterion):
    with criterion("Mask oracle (seq_len 2..32, both modes)") as c:
        bad = []
        for n in range(2, 33):
            for mode in ("peter", "left_to_right"):
                expect = np.full((n, n), MASK_SENTINEL)
                for q in range(1, n + 1):  # 1-based query position
                    for k in range(1, n + 1):
                        if k <= q or (mode == "peter" and (q, k) == (1, 2)):
                            expect[q - 1, k - 1] = 0.0
                if not np.array_equal(build_mask(n, mode), expect):
                    bad.append((n, mode))
            diff = np.argwhere(build_mask(n, "peter") != build_mask(n, "left_to_right")) + 1
            if [tuple(d) for d in diff.tolist()] != [(1, 2)]:
                bad.append((n, "diff"))
        c.check(not bad, "all 62 masks match; modes differ only at cell (1,2)" if not bad else f"mismatches {bad[:5]}")


# ---------------------------------------------------------------- 3. causality


def test_structural_causality(criterion):
    with criterion("Structural causality (10 random (sample, t) pairs)") as c:
        rng = np.random.default_rng(11)
        recs = synth_generate(5, 5, 5, 4, seed=4)
        vocab = build_vocab(recs, cap=60)
        cfg = PeterConfig(d=16, ffn_dim=32, n_layers=2, n_heads=2, word_budget=8)
        params = init_params(cfg, len(vocab.users), len(vocab.items), len(vocab.words), seed=5)
        batch = collate([encode_sample(r, vocab, False, cfg.word_budget) for r in recs[:6]])
        base = embed_sequence(params, batch.users, batch.items, batch.tokens).data
        worst_leak, checked = 0.0, 0
        nonzero_past = True
        for _ in range(10):
            b = int(rng.integers(len(batch)))
            t = int(rng.integers(batch.targets.shape[1] - 1))  # leave at least one future position
            s0 = Tensor(base.copy(), requires_grad=True)
            out = forward(params, batch.users, batch.items, batch.tokens, 0, vocab.pad, s0=s0)
            p = ad.take(out.word_probs, (b, t, int(batch.targets[b, t])))
            ad.backward(ad.scale(ad.log(p), -1.0))
            pos = 2 + t  # sequence index of the word position that predicts target t
            future = s0.grad[b, pos + 1 :]
            worst_leak = max(worst_leak, float(np.abs(future).max()))
            nonzero_past &= bool(np.abs(s0.grad[b, : pos + 1]).max() > 0)
            checked += future.shape[0]
        c.check(
            worst_leak == 0.0 and nonzero_past,
            f"max |grad| over {checked} future positions = {worst_leak!r} (exactly zero required); past gradients non-zero",
        )


# ---------------------------------------------------------------- 4. metric oracles


def _random_corpus(rng):
    words = list("abcdef")
    n = int(rng.integers(2, 7))
    sent = lambda lo: [str(w) for w in rng.choice(words, size=int(rng.integers(lo, 9)))]
    cands = [sent(0) for _ in range(n)]
    refs = [sent(1) for _ in range(n)]
    universe = sorted(set(rng.choice(words + ["a b", "c d"], size=int(rng.integers(1, 6))).tolist()))
    feats = [str(rng.choice(universe)) for _ in range(n)]
    return cands, refs, feats, universe, rng.uniform(1, 5, n).tolist(), rng.uniform(1, 5, n).tolist()


def test_metric_oracles(criterion):
    with criterion(f"Metric oracles ({N_METRIC_CORPORA} random corpora, tol {METRIC_TOL:g}, plus hand examples)") as c:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(N_METRIC_CORPORA):
            cands, refs, feats, uni, rt, rp = _random_corpus(rng)
            diffs = []
            for n in (1, 4):
                exp = 100 * sum(oracles.oracle_bleu(a, b, n) for a, b in zip(cands, refs)) / len(cands)
                diffs.append(bleu_n(cands, refs, n) - exp)
            for n in (1, 2):
                got = rouge_n(cands, refs, n)
                diffs += [g - e for g, e in zip((got.precision, got.recall, got.f1), oracles.oracle_rouge(cands, refs, n))]
            diffs.append(usr(cands) - len({tuple(x) for x in cands}) / len(cands))
            diffs.append(fmr(cands, feats) - sum(oracles.has(a, f) for a, f in zip(cands, feats)) / len(cands))
            diffs.append(fcr(cands, uni) - sum(any(oracles.has(a, f) for a in cands) for f in uni) / len(uni))
            diffs.append(div(cands, uni) - oracles.oracle_div(cands, uni))
            rmse, mae = rmse_mae(rt, rp)
            d = [x - y for x, y in zip(rt, rp)]
            diffs += [rmse - math.sqrt(sum(x * x for x in d) / len(d)), mae - sum(abs(x) for x in d) / len(d)]
            worst = max(worst, max(abs(x) for x in diffs))
        r1 = rouge_n([["a", "b", "c"]], [["a", "b", "d"]], 1)
        r2 = rouge_n([["a", "b", "c"]], [["a", "b", "d"]], 2)
        hand = [
            bleu_n([["the"] * 3], [["the", "cat"]], 1) == pytest.approx(100 / 3, abs=1e-12),
            (r1.precision, r1.recall, r1.f1) == pytest.approx((200 / 3,) * 3, abs=1e-12),
            (r2.precision, r2.recall) == (50.0, 50.0),
            div([["a", "b"], ["b", "c"], ["a", "b", "c"]], ["a", "b", "c"]) == pytest.approx(5 / 3, abs=1e-15),
            rmse_mae([1, 3], [2, 5]) == pytest.approx((math.sqrt(2.5), 1.5), abs=1e-15),
        ]
        c.check(worst <= METRIC_TOL and all(hand), f"max |library - oracle| = {worst:.1e}; hand examples {sum(hand)}/{len(hand)}")


# ---------------------------------------------------------------- 5 & 7. objective identity, training sanity


@pytest.fixture(scope="module")
def three_epoch_run():
    recs = synth_generate(50, 50, 20, 50, seed=SEED)
    tr, va, _ = split(recs, SplitSpec(seed=SEED))
    vocab = build_vocab(tr, 500)
    cfg = PeterConfig(d=64, ffn_dim=256, n_layers=2, n_heads=2, word_budget=15)
    enc = lambda rs: [encode_sample(r, vocab, False, 15) for r in rs]
    params = init_params(cfg, len(vocab.users), len(vocab.items), len(vocab.words), seed=SEED)
    state = train(params, enc(tr), enc(va), vocab.pad, TrainSchedule(max_epochs=3, seed=SEED))
    return cfg, state, vocab, enc(tr), enc(va)


def test_objective_identity(criterion, three_epoch_run):
    with criterion("Weighted-sum identity J = λe·Le + λc·Lc + λr·Lr on every step of a 3-epoch run") as c:
        cfg, state, *_ = three_epoch_run
        bad = [
            s for s in state.steps
            if s.J != cfg.lambda_e * s.L_e + cfg.lambda_c * s.L_c + cfg.lambda_r * s.L_r
        ]
        c.check(state.epoch == 3 and not bad and len(state.steps) > 0,
                f"{len(state.steps)} steps checked, {len(bad)} differ (exact equality required)")


def test_training_sanity(criterion, three_epoch_run):
    with criterion("Training sanity (J falls over epochs 1-3; exactly 5 forced decays)") as c:
        _, state, vocab, tr, va = three_epoch_run
        js = [h["train_J"] for h in state.history]
        monotone = len(js) == 3 and js[0] > js[1] > js[2]
        cfg = PeterConfig(d=16, ffn_dim=32, n_layers=2, n_heads=2, word_budget=15)
        params = init_params(cfg, len(vocab.users), len(vocab.items), len(vocab.words), seed=SEED)
        forced = train(
            params, tr[:256], va, vocab.pad, TrainSchedule(max_epochs=100, seed=SEED),
            validate=lambda _: LossBreakdown(1.0, 1.0, 1.0, 1.0),
        )
        stops = forced.decay_count == 5 and forced.epoch == 6 and forced.lr == 0.25**5
        c.check(
            monotone and stops,
            f"epoch-mean train J {', '.join(f'{j:.4f}' for j in js)}; forced run stopped after "
            f"{forced.epoch} epochs, {forced.decay_count} decays, lr {forced.lr:.3e}",
        )


# ---------------------------------------------------------------- 6. personalization reproduction


@pytest.mark.slow
def test_personalization_reproduction(criterion, tmp_path):
    with criterion(f"Personalization reproduction (synthetic corpus, seed {SEED})") as c:
        t0 = time.perf_counter()
        reports = cmd_ablate(corpus_run_config(tmp_path), ["disable_Lc", "left_to_right"])
        elapsed = time.perf_counter() - t0
        base, no_lc, l2r = reports["base"], reports["disable_Lc"], reports["left_to_right"]
        a = base.USR >= 2 * no_lc.USR
        b = base.FMR > no_lc.FMR
        cc = l2r.RMSE >= RMSE_MARGIN * base.RMSE
        c.check(
            a and b and cc and elapsed < REPRO_BUDGET_S,
            f"(a) USR {base.USR:.3f} vs {no_lc.USR:.3f} [{'ok' if a else 'MISS'}]; "
            f"(b) FMR {base.FMR:.3f} vs {no_lc.FMR:.3f} [{'ok' if b else 'MISS'}]; "
            f"(c) RMSE {l2r.RMSE:.3f} vs {base.RMSE:.3f} = {l2r.RMSE / base.RMSE:.3f}x [{'ok' if cc else 'MISS'}]; "
            f"{elapsed:.0f}s",
        )


# ---------------------------------------------------------------- 8. determinism


def test_determinism(criterion, tmp_path):
    with criterion("Determinism (two train+generate runs, byte-identical generations)") as c:
        files = []
        for run in ("a", "b"):
            cfg = corpus_run_config(tmp_path / run, max_epochs=2)
            cmd_train(cfg)
            files.append(cmd_generate(cfg.out).read_bytes())
        c.check(files[0] == files[1] and len(files[0]) > 0, f"{len(files[0])} bytes, identical={files[0] == files[1]}")


# ---------------------------------------------------------------- 9. checkpoint round trip


def test_checkpoint_round_trip(criterion, tmp_path):
    with criterion("Checkpoint round-trip (10 random inputs, bit-identical)") as c:
        cfg = PeterConfig(d=64, ffn_dim=256, n_layers=2, n_heads=2, word_budget=15)
        params = init_params(cfg, 50, 50, 60, seed=SEED)
        save_checkpoint(params, tmp_path / "m.npz")
        loaded, _ = load_checkpoint(tmp_path / "m.npz", expect=cfg)
        rng = np.random.default_rng(99)
        same = 0
        for _ in range(10):
            b = int(rng.integers(1, 5))
            users, items = rng.integers(0, 50, b), rng.integers(0, 50, b)
            tokens = rng.integers(0, 60, size=(b, int(rng.integers(1, 17))))
            x = forward(params, users, items, tokens)
            y = forward(loaded, users, items, tokens)
            same += all(
                u.data.tobytes() == v.data.tobytes()
                for u, v in ((x.hidden, y.hidden), (x.word_probs, y.word_probs), (x.context_probs, y.context_probs), (x.rating, y.rating))
            )
        c.check(same == 10, f"{same}/10 inputs bit-identical across hidden states, word/context distributions and rating")
