"""Records, vocabulary, splits, sequence encoding and batching."""

from __future__ import annotations

import json
import logging
import math
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

BOS, EOS, PAD, UNK = "<bos>", "<eos>", "<pad>", "<unk>"
SPECIALS = (BOS, EOS, PAD, UNK)
REQUIRED_KEYS = ("user", "item", "rating", "explanation", "feature")


class DataError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip trailing punctuation per token."""
    out = []
    for tok in text.lower().split():
        tok = tok.rstrip(string.punctuation)
        if tok:
            out.append(tok)
    return out


@dataclass(frozen=True)
class InteractionRecord:
    user: str
    item: str
    rating: float
    explanation: tuple[str, ...]
    feature: str

    @property
    def feature_words(self) -> tuple[str, ...]:
        return tuple(tokenize(self.feature))

    def to_json(self) -> dict:
        return {
            "user": self.user,
            "item": self.item,
            "rating": self.rating,
            "explanation": " ".join(self.explanation),
            "feature": self.feature,
        }


def parse_record(obj: dict, rating_bounds: tuple[float, float] | None = None) -> InteractionRecord:
    missing = [k for k in REQUIRED_KEYS if k not in obj]
    if missing:
        raise DataError(f"missing key {missing[0]!r}")
    try:
        rating = float(obj["rating"])
    except (TypeError, ValueError):
        raise DataError(f"non-numeric rating {obj['rating']!r}") from None
    if not math.isfinite(rating):
        raise DataError(f"non-finite rating {obj['rating']!r}")
    if rating_bounds is not None and not rating_bounds[0] <= rating <= rating_bounds[1]:
        raise DataError(f"rating {rating} outside bounds {rating_bounds}")
    words = tokenize(str(obj["explanation"]))
    if not words:
        raise DataError("empty explanation")
    feature = " ".join(tokenize(str(obj["feature"])))
    if not feature:
        raise DataError("empty feature")
    return InteractionRecord(str(obj["user"]), str(obj["item"]), rating, tuple(words), feature)


def load_records(path, rating_bounds: tuple[float, float] | None = None) -> list[InteractionRecord]:
    """Read a JSON-lines dataset. All malformed lines are collected and
    reported together in one :class:`DataError`."""
    records, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise DataError("line is not a JSON object")
                records.append(parse_record(obj, rating_bounds))
            except (json.JSONDecodeError, DataError) as exc:
                errors.append(f"line {lineno}: {exc}")
    if errors:
        raise DataError(f"{len(errors)} malformed line(s) in {path}:\n" + "\n".join(errors[:20]))
    if not records:
        log.warning("no records in %s", path)
    return records


def save_records(records: Sequence[InteractionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


# ---------------------------------------------------------------- vocabulary


@dataclass
class Vocabulary:
    words: list[str]
    users: list[str]
    items: list[str]
    word_index: dict[str, int] = field(init=False, repr=False)
    user_index: dict[str, int] = field(init=False, repr=False)
    item_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.word_index = {w: i for i, w in enumerate(self.words)}
        self.user_index = {u: i for i, u in enumerate(self.users)}
        self.item_index = {it: i for i, it in enumerate(self.items)}
        if len(self.word_index) != len(self.words):
            raise ValueError("duplicate words in vocabulary")

    @property
    def bos(self) -> int:
        return self.word_index[BOS]

    @property
    def eos(self) -> int:
        return self.word_index[EOS]

    @property
    def pad(self) -> int:
        return self.word_index[PAD]

    @property
    def unk(self) -> int:
        return self.word_index[UNK]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.word_index[s] for s in SPECIALS)

    def __len__(self) -> int:
        return len(self.words)

    def encode_word(self, w: str) -> int:
        return self.word_index.get(w, self.unk)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.words[i] for i in ids]

    def to_json(self) -> dict:
        return {"words": self.words, "users": self.users, "items": self.items}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(list(obj["words"]), list(obj["users"]), list(obj["items"]))


def build_vocab(records: Sequence[InteractionRecord], cap: int = 20000) -> Vocabulary:
    """Keep the ``cap`` most frequent training words (ties: lexicographic),
    then append the four specials. Users and items get their own indices."""
    if not records:
        raise ValueError("cannot build a vocabulary from zero records")
    counts: Counter[str] = Counter()
    for r in records:
        counts.update(r.explanation)
        counts.update(r.feature_words)
    for s in SPECIALS:
        counts.pop(s, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
    words = [w for w, _ in ranked] + list(SPECIALS)
    users = sorted({r.user for r in records})
    items = sorted({r.item for r in records})
    return Vocabulary(words, users, items)


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[int, int, int] = (8, 1, 1)
    seed: int = 0
    cover_ids: bool = True


def split_indices(records: Sequence[InteractionRecord], spec: SplitSpec = SplitSpec()) -> dict[str, list[int]]:
    n = len(records)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    total = sum(spec.ratios)
    n_train = round(n * spec.ratios[0] / total)
    n_valid = round(n * spec.ratios[1] / total)
    n_valid = min(n_valid, n - n_train)
    rng = np.random.default_rng(spec.seed)
    order = [int(i) for i in rng.permutation(n)]

    reserved: list[int] = []
    if spec.cover_ids:
        seen_u: set[str] = set()
        seen_i: set[str] = set()
        for idx in order:
            r = records[idx]
            if r.user not in seen_u or r.item not in seen_i:
                reserved.append(idx)
                seen_u.add(r.user)
                seen_i.add(r.item)
        if len(reserved) > n_train:
            raise DataError(
                f"dataset too small: {len(reserved)} records needed to cover every user and item "
                f"but the training split holds only {n_train}"
            )
    taken = set(reserved)
    rest = [i for i in order if i not in taken]
    fill = n_train - len(reserved)
    train = sorted(reserved + rest[:fill])
    valid = sorted(rest[fill : fill + n_valid])
    test = sorted(rest[fill + n_valid :])
    return {"train": train, "valid": valid, "test": test}


def split(records: Sequence[InteractionRecord], spec: SplitSpec = SplitSpec()):
    idx = split_indices(records, spec)
    return tuple([records[i] for i in idx[k]] for k in ("train", "valid", "test"))


def write_manifest(path, indices: dict[str, list[int]], seed: int, dataset: str | None = None) -> None:
    payload = {"seed": seed, "dataset": dataset, **{k: indices[k] for k in ("train", "valid", "test")}}
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- encoding


@dataclass(frozen=True)
class EncodedSample:
    user: int
    item: int
    features: tuple[int, ...]
    tokens: tuple[int, ...]  # word segment: features, <bos>, explanation, padding
    targets: tuple[int, ...]  # one per position from <bos> on: e_1..e_T, <eos>, padding
    loss_mask: tuple[bool, ...]
    rating: float

    @property
    def n_words(self) -> int:
        return sum(self.loss_mask) - 1

    @property
    def seq_len(self) -> int:
        return 2 + len(self.tokens)

    @property
    def explanation_ids(self) -> tuple[int, ...]:
        return self.targets[: self.n_words]


def encode_sample(
    record: InteractionRecord,
    vocab: Vocabulary,
    use_features: bool = False,
    word_budget: int = 15,
    feature_budget: int | None = None,
) -> EncodedSample:
    if word_budget < 1:
        raise ValueError("word_budget must be >= 1")
    if record.user not in vocab.user_index:
        raise KeyError(f"unknown user {record.user!r} ({len(vocab.users)} users known)")
    if record.item not in vocab.item_index:
        raise KeyError(f"unknown item {record.item!r} ({len(vocab.items)} items known)")
    feats = tuple(vocab.encode_word(w) for w in record.feature_words[:feature_budget]) if use_features else ()
    words = [vocab.encode_word(w) for w in record.explanation[:word_budget]]
    n = len(words)
    pad = vocab.pad
    tokens = feats + (vocab.bos,) + tuple(words) + (pad,) * (word_budget - n)
    targets = tuple(words) + (vocab.eos,) + (pad,) * (word_budget - n)
    mask = (True,) * (n + 1) + (False,) * (word_budget - n)
    return EncodedSample(
        vocab.user_index[record.user], vocab.item_index[record.item], feats, tokens, targets, mask, record.rating
    )


def decode_sample(sample: EncodedSample, vocab: Vocabulary) -> list[str]:
    return vocab.decode(sample.explanation_ids)


@dataclass
class Batch:
    users: np.ndarray  # (B,)
    items: np.ndarray  # (B,)
    tokens: np.ndarray  # (B, n_feat + 1 + budget)
    targets: np.ndarray  # (B, budget + 1)
    loss_mask: np.ndarray  # (B, budget + 1) bool
    ratings: np.ndarray  # (B,)
    n_features: int

    def __len__(self) -> int:
        return len(self.users)

    @property
    def context_mask(self) -> np.ndarray:
        """Explanation-word positions only (the <eos> slot removed)."""
        counts = self.loss_mask.sum(axis=1) - 1
        return np.arange(self.targets.shape[1])[None, :] < counts[:, None]


def collate(samples: Sequence[EncodedSample]) -> Batch:
    lengths = {s.seq_len for s in samples}
    nfeat = {len(s.features) for s in samples}
    if len(lengths) != 1 or len(nfeat) != 1:
        raise ValueError(f"cannot collate samples of differing layouts: lengths {sorted(lengths)}")
    return Batch(
        users=np.array([s.user for s in samples], dtype=np.int64),
        items=np.array([s.item for s in samples], dtype=np.int64),
        tokens=np.array([s.tokens for s in samples], dtype=np.int64),
        targets=np.array([s.targets for s in samples], dtype=np.int64),
        loss_mask=np.array([s.loss_mask for s in samples], dtype=bool),
        ratings=np.array([s.rating for s in samples], dtype=np.float64),
        n_features=nfeat.pop(),
    )


def batch_iter(
    samples: Sequence[EncodedSample], batch_size: int = 128, seed: int = 0, epoch: int = 0, shuffle: bool = True
) -> Iterator[Batch]:
    """Seeded shuffled minibatches; the final partial batch is kept.

    Samples with differing sequence layouts (multi-word features) are batched
    within their own length group, and the group batches are interleaved.
    """
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(samples)) if shuffle else np.arange(len(samples))
    groups: dict[int, list[int]] = {}
    for i in order:
        groups.setdefault(samples[i].seq_len, []).append(int(i))
    chunks = [
        g[k : k + batch_size] for _, g in sorted(groups.items()) for k in range(0, len(g), batch_size)
    ]
    if shuffle and len(groups) > 1:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    for chunk in chunks:
        yield collate([samples[i] for i in chunk])


# ---------------------------------------------------------------- synthetic data

_POSITIVE = ("great", "excellent", "lovely", "wonderful", "perfect")
_NEUTRAL = ("fine", "decent", "okay", "average", "acceptable")
_NEGATIVE = ("poor", "terrible", "disappointing", "awful", "bad")
_FEATURE_POOL = (
    "pool", "gym", "bar", "lobby", "breakfast", "bathroom", "shower", "bed", "view", "staff",
    "location", "price", "wifi", "parking", "restaurant", "balcony", "spa", "kitchen", "garden", "beach",
    "service", "decor", "noise", "coffee", "elevator", "carpet", "desk", "lighting", "towels", "terrace",
)
_TEMPLATES = (
    "the {f} was {a}",
    "the {f} is {a} and the room was clean",
    "i found the {f} {a}",
    "really {a} {f} for the money",
    "we thought the {f} was {a} overall",
    "the {f} here is {a}",
)


@dataclass
class SynthWorld:
    features: list[str]
    user_likes: list[set[int]]
    item_has: list[set[int]]
    user_style: np.ndarray
    item_quality: np.ndarray


def _draw_world(rng, n_users, n_items, n_features, features_per_entity) -> SynthWorld:
    pool = list(_FEATURE_POOL)
    if n_features <= len(pool):
        feats = pool[:n_features]
    else:
        feats = pool + [f"aspect{k}" for k in range(n_features - len(pool))]
    k = min(features_per_entity, n_features)
    user_likes = [set(rng.choice(n_features, size=k, replace=False).tolist()) for _ in range(n_users)]
    item_has = [set(rng.choice(n_features, size=k, replace=False).tolist()) for _ in range(n_items)]
    user_style = rng.integers(len(_TEMPLATES), size=n_users)
    item_quality = rng.normal(0.0, 0.8, size=n_items)
    return SynthWorld(feats, user_likes, item_has, user_style, item_quality)


def synth_world(n_users: int, n_items: int, n_features: int, seed: int = 0, features_per_entity: int = 4) -> SynthWorld:
    """The latent user/item profiles behind ``synth_generate`` for the same arguments."""
    return _draw_world(np.random.default_rng(seed), n_users, n_items, n_features, features_per_entity)


def synth_generate(
    n_users: int,
    n_items: int,
    n_features: int,
    records_per_user: int,
    seed: int = 0,
    features_per_entity: int = 4,
    rating_bounds: tuple[float, float] = (1.0, 5.0),
    template_habit: float = 0.0,
    feature_noise: float = 0.5,
) -> list[InteractionRecord]:
    """Template corpus with a recoverable user/item signal.

    Users like a subset of features and items offer a subset. A record talks
    about a feature from the overlap (falling back to the item's own set), or
    with probability ``feature_noise`` about any feature. The sentence template
    is the user's habitual one with probability ``template_habit``. Ratings rise
    with overlap plus a per-item quality offset and noise.
    """
    if min(n_users, n_items, n_features, records_per_user) < 2:
        raise ValueError("all counts must be >= 2")
    rng = np.random.default_rng(seed)
    w = _draw_world(rng, n_users, n_items, n_features, features_per_entity)
    lo, hi = rating_bounds

    records = []
    for u in range(n_users):
        chosen = rng.choice(n_items, size=records_per_user, replace=records_per_user > n_items)
        for it in chosen.tolist():
            overlap = sorted(w.user_likes[u] & w.item_has[it])
            candidates = overlap or sorted(w.item_has[it])
            if rng.random() < feature_noise:
                f = w.features[int(rng.integers(n_features))]
            else:
                f = w.features[candidates[int(rng.integers(len(candidates)))]]
            raw = lo + 1.5 + 1.0 * len(overlap) + w.item_quality[it] + rng.normal(0.0, 0.3)
            rating = float(min(hi, max(lo, round(raw))))
            mood = _POSITIVE if rating >= 4 else _NEUTRAL if rating >= 3 else _NEGATIVE
            if rng.random() < template_habit:
                tpl = _TEMPLATES[w.user_style[u]]
            else:
                tpl = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
            adj = mood[int(rng.integers(len(mood)))]
            records.append(InteractionRecord(f"u{u}", f"i{it}", rating, tuple(tpl.format(f=f, a=adj).split()), f))
    return records
