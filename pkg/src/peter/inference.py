"""Greedy decoding, rating prediction and context-word reporting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from peter import autodiff as ad
from peter.corpus import InteractionRecord, Vocabulary, tokenize
from peter.model import ModelParams, forward


class UnknownIdError(KeyError):
    pass


def _resolve(vocab: Vocabulary, user: str, item: str) -> tuple[int, int]:
    if user not in vocab.user_index:
        raise UnknownIdError(f"unknown user {user!r} ({len(vocab.users)} users known)")
    if item not in vocab.item_index:
        raise UnknownIdError(f"unknown item {item!r} ({len(vocab.items)} items known)")
    return vocab.user_index[user], vocab.item_index[item]


def _feature_ids(params: ModelParams, vocab: Vocabulary, features) -> list[int]:
    cfg = params.config
    if cfg.use_features and features is None:
        raise ValueError("this model was trained with features; they are required at generation time")
    if not cfg.use_features:
        if features:
            raise ValueError("this model was trained without features")
        return []
    words = tokenize(features) if isinstance(features, str) else list(features)
    return [vocab.encode_word(w) for w in words[: cfg.max_feature_words]]


def greedy_decode(params: ModelParams, vocab: Vocabulary, user: str, item: str, features=None) -> list[str]:
    """Re-run the full model on [u, i, F, <bos>, words so far] and append the
    argmax word until <eos> or the word budget."""
    return greedy_decode_batch(params, vocab, [(user, item, features)])[0]


def greedy_decode_batch(params: ModelParams, vocab: Vocabulary, queries: Sequence[tuple]) -> list[list[str]]:
    """Decode many (user, item, features) queries in lock-step.

    Rows that have emitted <eos> keep stepping but their extra output is
    discarded; there is no padding, so rows never interact.
    """
    if not queries:
        return []
    ids = [_resolve(vocab, u, i) for u, i, _ in queries]
    feats = [_feature_ids(params, vocab, f) for _, _, f in queries]
    out: list[list[str]] = [None] * len(queries)  # type: ignore[list-item]
    # group by feature length so every batch shares one layout
    groups: dict[int, list[int]] = {}
    for k, f in enumerate(feats):
        groups.setdefault(len(f), []).append(k)
    for nf, rows in sorted(groups.items()):
        users = np.array([ids[k][0] for k in rows])
        items = np.array([ids[k][1] for k in rows])
        seq = np.array([feats[k] + [vocab.bos] for k in rows], dtype=np.int64).reshape(len(rows), nf + 1)
        generated = _lockstep(params, vocab, users, items, seq, nf)
        for k, words in zip(rows, generated):
            out[k] = words
    return out


def _lockstep(params, vocab, users, items, seq, n_features) -> list[list[str]]:
    budget = params.config.word_budget
    n = len(users)
    finished = np.zeros(n, dtype=bool)
    emitted: list[list[int]] = [[] for _ in range(n)]
    with ad.no_grad():
        for _ in range(budget):
            probs = forward(params, users, items, seq, n_features).word_probs.data[:, -1, :]
            nxt = probs.argmax(axis=1)  # first maximal index on ties
            for r in range(n):
                if finished[r]:
                    continue
                if nxt[r] == vocab.eos:
                    finished[r] = True
                else:
                    emitted[r].append(int(nxt[r]))
            if finished.all():
                break
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
    specials = vocab.special_ids
    return [[vocab.words[t] for t in row if t not in specials] for row in emitted]


def predict_rating_raw(params: ModelParams, vocab: Vocabulary, user: str, item: str, features=None) -> float:
    u, i = _resolve(vocab, user, item)
    f = _feature_ids(params, vocab, features)
    with ad.no_grad():
        out = forward(params, [u], [i], [f + [vocab.bos]], len(f))
    return float(out.rating.data[0])


def clamp_rating(r: float, bounds: tuple[float, float]) -> float:
    return float(min(bounds[1], max(bounds[0], r)))


def predict_rating(
    params: ModelParams, vocab: Vocabulary, user: str, item: str, features=None, bounds=(1.0, 5.0)
) -> float:
    return clamp_rating(predict_rating_raw(params, vocab, user, item, features), bounds)


def rank_context(probs: np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` largest probabilities; ties go to the lower index."""
    if k > len(probs):
        raise ValueError(f"k={k} exceeds vocabulary size {len(probs)}")
    order = np.lexsort((np.arange(len(probs)), -probs))
    return [int(i) for i in order[:k]]


def top_context_words(
    params: ModelParams, vocab: Vocabulary, user: str, item: str, k: int = 15, features=None
) -> list[tuple[str, float]]:
    u, i = _resolve(vocab, user, item)
    f = _feature_ids(params, vocab, features)
    with ad.no_grad():
        probs = forward(params, [u], [i], [f + [vocab.bos]], len(f)).context_probs.data[0]
    return [(vocab.words[j], float(probs[j])) for j in rank_context(probs, k)]


@dataclass
class GenerationResult:
    user: str
    item: str
    feature: str
    reference: str
    generated: str
    rating_true: float
    rating_pred: float
    context_top_k: list

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _prefix_outputs(params: ModelParams, vocab: Vocabulary, queries: Sequence[tuple]):
    """Raw ratings and position-2 distributions from one [u, i, F, <bos>] pass."""
    ids = [_resolve(vocab, u, i) for u, i, _ in queries]
    feats = [_feature_ids(params, vocab, f) for _, _, f in queries]
    ratings = np.zeros(len(queries))
    context = np.zeros((len(queries), params.n_words))
    groups: dict[int, list[int]] = {}
    for k, f in enumerate(feats):
        groups.setdefault(len(f), []).append(k)
    with ad.no_grad():
        for nf, rows in sorted(groups.items()):
            seq = np.array([feats[k] + [vocab.bos] for k in rows], dtype=np.int64).reshape(len(rows), nf + 1)
            out = forward(params, [ids[k][0] for k in rows], [ids[k][1] for k in rows], seq, nf)
            ratings[rows] = out.rating.data
            context[rows] = out.context_probs.data
    return ratings, context


def generate(
    params: ModelParams,
    vocab: Vocabulary,
    records: Sequence[InteractionRecord],
    bounds: tuple[float, float] = (1.0, 5.0),
    k: int = 15,
    batch_size: int = 256,
) -> list[GenerationResult]:
    """Decode, rate and rank context words for every record, in order."""
    use_f = params.config.use_features
    results = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        queries = [(r.user, r.item, r.feature if use_f else None) for r in chunk]
        texts = greedy_decode_batch(params, vocab, queries)
        ratings, context = _prefix_outputs(params, vocab, queries)
        for row, (r, words) in enumerate(zip(chunk, texts)):
            top = rank_context(context[row], k)
            results.append(
                GenerationResult(
                    user=r.user,
                    item=r.item,
                    feature=r.feature,
                    reference=" ".join(r.explanation),
                    generated=" ".join(words),
                    rating_true=r.rating,
                    rating_pred=clamp_rating(float(ratings[row]), bounds),
                    context_top_k=[[vocab.words[j], float(context[row, j])] for j in top],
                )
            )
    return results


def write_generations(results: Sequence[GenerationResult], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(r.to_json() + "\n")


def read_generations(path) -> list[GenerationResult]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(GenerationResult(**json.loads(line)))
    return rows
