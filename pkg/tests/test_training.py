import dataclasses
import math

import numpy as np
import pytest

from peter import autodiff as ad
from peter.autodiff import Tensor
from peter.corpus import SplitSpec, build_vocab, collate, encode_sample, split, synth_generate
from peter.model import ForwardOutput, PeterConfig, build_mask, forward_batch, init_params
from peter.training import (
    LossBreakdown,
    PlateauDecay,
    TrainSchedule,
    ablate,
    context_loss,
    evaluate_loss,
    explanation_loss,
    objective,
    rating_loss,
    train,
)

TINY = PeterConfig(d=8, ffn_dim=16, n_layers=1, n_heads=2, word_budget=6)


def stub(word_probs=None, context_probs=None, rating=None):
    """A ForwardOutput carrying only the distributions the losses read."""
    t = lambda a: None if a is None else Tensor(np.asarray(a, dtype=np.float64))
    return ForwardOutput(None, [], t(word_probs), t(context_probs), t(rating), [], 0)


@pytest.fixture(scope="module")
def tiny_data():
    rs = synth_generate(6, 6, 5, 8, seed=2)
    vocab = build_vocab(rs, cap=60)
    tr, va, _ = split(rs, SplitSpec(seed=2))
    enc = lambda part: [encode_sample(r, vocab, word_budget=TINY.word_budget) for r in part]
    return vocab, enc(tr), enc(va)


def tiny_params(vocab, cfg=TINY, seed=0):
    return init_params(cfg, len(vocab.users), len(vocab.items), len(vocab.words), seed=seed)


# ---------------------------------------------------------------- explanation loss


def test_explanation_loss_perfect_is_zero():
    targets = np.array([[1, 2, 0]])
    probs = np.zeros((1, 3, 4))
    probs[0, [0, 1, 2], [1, 2, 0]] = 1.0
    assert explanation_loss(stub(probs), targets, np.ones((1, 3), bool)).item() == 0.0


def test_explanation_loss_uniform():
    probs = np.full((2, 4, 100), 0.01)
    targets = np.array([[3, 7, 9, 0], [5, 5, 0, 0]])
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], bool)
    assert explanation_loss(stub(probs), targets, mask).item() == pytest.approx(math.log(100), abs=1e-12)


def test_explanation_loss_duplicated_batch_unchanged(rng):
    probs = rng.dirichlet(np.ones(6), size=(2, 3))
    targets = rng.integers(0, 6, size=(2, 3))
    mask = np.array([[1, 1, 0], [1, 1, 1]], bool)
    a = explanation_loss(stub(probs), targets, mask).item()
    b = explanation_loss(stub(np.concatenate([probs, probs])), np.vstack([targets, targets]), np.vstack([mask, mask])).item()
    assert a == pytest.approx(b, abs=1e-14)


def test_explanation_loss_floors_zero_probability():
    probs = np.array([[[1.0, 0.0]]])
    val = explanation_loss(stub(probs), np.array([[1]]), np.ones((1, 1), bool)).item()
    assert val == pytest.approx(-math.log(1e-12))


# ---------------------------------------------------------------- context loss


def test_context_loss_perfect_single_word():
    c = np.array([[0.0, 1.0, 0.0]])
    assert context_loss(stub(context_probs=c), np.array([[1, 2]]), np.array([[True, False]])).item() == 0.0


def test_context_loss_bag_hand_value():
    c = np.array([[0.5, 0.5, 0.0]])
    val = context_loss(stub(context_probs=c), np.array([[0, 0, 1]]), np.ones((1, 3), bool)).item()
    assert val == pytest.approx(math.log(2), abs=1e-15)


def test_context_loss_order_invariant(rng):
    c = rng.dirichlet(np.ones(7), size=1)
    words = np.array([[1, 4, 4, 6]])
    m = np.ones((1, 4), bool)
    a = context_loss(stub(context_probs=c), words, m).item()
    b = context_loss(stub(context_probs=c), words[:, ::-1].copy(), m).item()
    assert a == pytest.approx(b, abs=1e-15)


# ---------------------------------------------------------------- rating loss


def test_rating_loss_cases():
    assert rating_loss(Tensor(np.array([2.0, 3.0])), [2, 3]).item() == 0.0
    assert rating_loss(Tensor(np.array([2.0, 5.0])), [1, 3]).item() == 2.5
    assert rating_loss(Tensor(np.array([2.0, 5.0, 4.0])), [1, 3, 4]).item() <= 2.5


# ---------------------------------------------------------------- objective


def test_objective_is_weighted_sum(tiny_data):
    vocab, tr, _ = tiny_data
    cfg = dataclasses.replace(TINY, lambda_e=0.7, lambda_c=1.3, lambda_r=0.2)
    p = tiny_params(vocab, cfg)
    batch = collate(tr[:5])
    j, parts = objective(forward_batch(p, batch, vocab.pad), batch, cfg)
    assert parts.J == j.item()
    assert parts.J == 0.7 * parts.L_e + 1.3 * parts.L_c + 0.2 * parts.L_r
    assert min(parts.L_e, parts.L_c, parts.L_r) >= 0


def test_ablate_modes():
    base = PeterConfig()
    assert ablate(base, "disable_Lc") == dataclasses.replace(base, lambda_c=0.0)
    assert ablate(base, "disable_Lr") == dataclasses.replace(base, lambda_r=0.0)
    l2r = ablate(base, "left_to_right")
    assert l2r == dataclasses.replace(base, mask_mode="left_to_right")
    assert np.argwhere(build_mask(5, l2r.mask_mode) != build_mask(5, base.mask_mode)).tolist() == [[0, 1]]
    with pytest.raises(ValueError, match="unknown ablation"):
        ablate(base, "disable_everything")


def test_disable_rating_loss_zeroes_rating_head_grads(tiny_data):
    vocab, tr, _ = tiny_data
    cfg = ablate(TINY, "disable_Lr")
    p = tiny_params(vocab, cfg)
    batch = collate(tr[:6])
    j, _ = objective(forward_batch(p, batch, vocab.pad), batch, cfg)
    ad.backward(j)
    for name in ("rating_w1", "rating_b1", "rating_w2", "rating_b2"):
        assert not np.any(p[name].grad)
    assert np.any(p["word_proj"].grad)


def test_single_sgd_step_decreases_objective(tiny_data):
    vocab, tr, _ = tiny_data
    p = tiny_params(vocab, seed=3)
    batch = collate(tr[:1])

    def j_value():
        with ad.no_grad():
            return objective(forward_batch(p, batch, vocab.pad), batch, TINY)[1].J

    before = j_value()
    j, _ = objective(forward_batch(p, batch, vocab.pad), batch, TINY)
    ad.backward(j)
    ad.sgd_step_with_clip(p.parameters(), 1e-3, 1.0)
    assert j_value() < before


# ---------------------------------------------------------------- schedule


def test_plateau_decay_five_steps():
    s = PlateauDecay(1.0, 0.25, 5)
    assert s.step(3.0)
    lrs = []
    for _ in range(5):
        assert not s.step(3.0)
        lrs.append(s.lr)
    assert s.done and s.decays == 5
    assert lrs == [0.25**k for k in range(1, 6)]
    assert s.lr == pytest.approx(9.765625e-4, abs=0)


def test_plateau_decay_monotone():
    s = PlateauDecay(1.0)
    prev = s.lr
    for v in [5, 4, 4.5, 3, 3, 3, 2, 9, 9]:
        s.step(v)
        assert s.lr <= prev and s.decays <= 5
        prev = s.lr


def test_train_stops_after_five_forced_decays(tiny_data):
    vocab, tr, va = tiny_data
    p = tiny_params(vocab)
    state = train(
        p, tr, va, vocab.pad, TrainSchedule(lr=0.1, batch_size=16, max_epochs=50),
        validate=lambda _: LossBreakdown(1.0, 1.0, 1.0, 1.0),
    )
    assert state.epoch == 6 and state.decay_count == 5
    assert [h["decayed"] for h in state.history] == [False] + [True] * 5
    # each row logs the rate used during that epoch; a decay applies from the next one
    assert [h["lr"] for h in state.history] == [0.1] + [0.1 * 0.25**k for k in range(5)]
    assert state.lr == pytest.approx(0.1 * 0.25**5)


def test_train_restores_best_parameters(tiny_data):
    vocab, tr, va = tiny_data
    p = tiny_params(vocab)
    first = {}

    def validate(params):
        if not first:
            first.update(params.state())
            return LossBreakdown(0, 0, 0, 0.0)
        return LossBreakdown(1, 1, 1, 1.0)

    train(p, tr, va, vocab.pad, TrainSchedule(lr=0.5, batch_size=16, max_epochs=10, max_decays=2), validate=validate)
    assert all(np.array_equal(p.state()[k], first[k]) for k in first)


def test_train_log_and_identity(tiny_data, tmp_path):
    import json

    vocab, tr, va = tiny_data
    p = tiny_params(vocab)
    state = train(p, tr, va, vocab.pad, TrainSchedule(lr=0.5, batch_size=16, max_epochs=3), log_path=tmp_path / "log.jsonl")
    rows = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1, 2]
    assert set(rows[0]) == {"epoch", "lr", "train_L_e", "train_L_c", "train_L_r", "train_J", "valid_J", "decayed"}
    for s in state.steps:
        assert s.J == TINY.lambda_e * s.L_e + TINY.lambda_c * s.L_c + TINY.lambda_r * s.L_r


def test_train_deterministic(tiny_data):
    vocab, tr, va = tiny_data
    sched = TrainSchedule(lr=0.5, batch_size=16, max_epochs=3, seed=4)
    a = train(tiny_params(vocab), tr, va, vocab.pad, sched)
    b = train(tiny_params(vocab), tr, va, vocab.pad, sched)
    assert a.best_valid == b.best_valid
    assert evaluate_loss(a.params, va, vocab.pad) == evaluate_loss(b.params, va, vocab.pad)


def test_train_objective_drops_on_fixed_corpus(tiny_data):
    vocab, tr, va = tiny_data
    state = train(tiny_params(vocab), tr, va, vocab.pad, TrainSchedule(lr=0.5, batch_size=16, max_epochs=6, seed=0))
    assert state.history[5]["train_J"] < state.history[0]["train_J"]
