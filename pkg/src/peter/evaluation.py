"""Text-quality, explainability and rating metrics over generation output.

Sentences are token lists (see :func:`peter.corpus.tokenize`). Averages use
:func:`math.fsum` so results do not depend on summation order.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

Sentence = Sequence[str]


def ngrams(tokens: Sentence, n: int) -> Counter:
    return Counter(tuple(tokens[k : k + n]) for k in range(len(tokens) - n + 1))


def _clipped_overlap(cand: Counter, ref: Counter) -> int:
    return sum(min(c, ref[g]) for g, c in cand.items())


# ---------------------------------------------------------------- BLEU


def sentence_bleu(candidate: Sentence, reference: Sentence, n: int = 4) -> float:
    """Sentence BLEU-n in [0, 1]: clipped n-gram precisions for orders 1..n,
    geometric mean, brevity penalty. A zero match count at order > 1 is
    smoothed to 1 / (count + 1)."""
    c, r = len(candidate), len(reference)
    if c == 0:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        cand = ngrams(candidate, k)
        total = sum(cand.values())
        match = _clipped_overlap(cand, ngrams(reference, k))
        if match == 0:
            if k == 1:
                return 0.0
            log_p += math.log(1.0 / (total + 1))
        else:
            log_p += math.log(match / total)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / n)


def bleu_n(candidates: Sequence[Sentence], references: Sequence[Sentence], n: int) -> float:
    """Mean sentence-level BLEU-n over pairs, as a percentage."""
    _check_pairs(candidates, references)
    return 100.0 * math.fsum(sentence_bleu(c, r, n) for c, r in zip(candidates, references)) / len(candidates)


# ---------------------------------------------------------------- ROUGE


@dataclass
class RougeScore:
    precision: float
    recall: float
    f1: float
    evaluated: int
    skipped: int


def rouge_n(candidates: Sequence[Sentence], references: Sequence[Sentence], n: int) -> RougeScore:
    """Per-pair ROUGE-n precision/recall/F1, averaged and scaled to percent.

    Pairs whose reference is shorter than ``n`` are skipped and counted.
    """
    _check_pairs(candidates, references)
    ps, rs, fs = [], [], []
    skipped = 0
    for cand_toks, ref_toks in zip(candidates, references):
        ref = ngrams(ref_toks, n)
        if not ref:
            skipped += 1
            continue
        cand = ngrams(cand_toks, n)
        hit = _clipped_overlap(cand, ref)
        p = hit / sum(cand.values()) if cand else 0.0
        r = hit / sum(ref.values())
        ps.append(p)
        rs.append(r)
        fs.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    m = len(ps)
    if m == 0:
        return RougeScore(0.0, 0.0, 0.0, 0, skipped)
    return RougeScore(100.0 * math.fsum(ps) / m, 100.0 * math.fsum(rs) / m, 100.0 * math.fsum(fs) / m, m, skipped)


# ---------------------------------------------------------------- diversity / explainability


def usr(candidates: Sequence[Sentence]) -> float:
    if not candidates:
        raise ValueError("usr needs at least one candidate")
    return len({tuple(c) for c in candidates}) / len(candidates)


def contains_phrase(tokens: Sentence, phrase: Sentence) -> bool:
    k = len(phrase)
    if k == 0:
        return False
    phrase = tuple(phrase)
    return any(tuple(tokens[s : s + k]) == phrase for s in range(len(tokens) - k + 1))


def _phrase(feature) -> tuple[str, ...]:
    return tuple(feature.split()) if isinstance(feature, str) else tuple(feature)


def fmr(candidates: Sequence[Sentence], features: Sequence) -> float:
    _check_pairs(candidates, features)
    hits = sum(contains_phrase(c, _phrase(f)) for c, f in zip(candidates, features))
    return hits / len(candidates)


def feature_sets(candidates: Sequence[Sentence], universe: Sequence) -> list[frozenset]:
    phrases = sorted({_phrase(f) for f in universe})
    return [frozenset(p for p in phrases if contains_phrase(c, p)) for c in candidates]


def fcr(candidates: Sequence[Sentence], universe: Sequence) -> float:
    uni = {_phrase(f) for f in universe}
    if not uni:
        raise ValueError("feature universe is empty")
    mentioned = set().union(*feature_sets(candidates, uni)) if candidates else set()
    return len(mentioned) / len(uni)


def div(candidates: Sequence[Sentence], universe: Sequence, pair_budget: int = 1_000_000, seed: int = 0) -> float:
    """Mean feature-set intersection size over candidate pairs (lower is more
    diverse). Exact when all pairs fit in ``pair_budget``, else a seeded
    uniform sample of ``pair_budget`` distinct pairs."""
    n = len(candidates)
    if n < 2:
        raise ValueError("div needs at least two candidates")
    sets = feature_sets(candidates, universe)
    total = n * (n - 1) // 2
    if total <= pair_budget:
        pairs = combinations(range(n), 2)
    else:
        rng = np.random.default_rng(seed)
        flat = rng.choice(total, size=pair_budget, replace=False)
        pairs = (_unrank_pair(int(k), n) for k in np.sort(flat))
        total = pair_budget
    return math.fsum(len(sets[i] & sets[j]) for i, j in pairs) / total


def _unrank_pair(k: int, n: int) -> tuple[int, int]:
    # k-th pair (i < j) in lexicographic order
    i = 0
    while k >= n - 1 - i:
        k -= n - 1 - i
        i += 1
    return i, i + 1 + k


# ---------------------------------------------------------------- ratings


def rmse_mae(r_true: Sequence[float], r_pred: Sequence[float]) -> tuple[float, float]:
    if len(r_true) != len(r_pred):
        raise ValueError(f"length mismatch: {len(r_true)} vs {len(r_pred)}")
    if not r_true:
        raise ValueError("rmse_mae needs at least one rating")
    err = [float(a) - float(b) for a, b in zip(r_true, r_pred)]
    n = len(err)
    return math.sqrt(math.fsum(e * e for e in err) / n), math.fsum(abs(e) for e in err) / n


def _check_pairs(a: Sequence, b: Sequence) -> None:
    if len(a) != len(b):
        raise ValueError(f"paired lists differ in length: {len(a)} vs {len(b)}")
    if not a:
        raise ValueError("no pairs to evaluate")


# ---------------------------------------------------------------- report


@dataclass
class MetricsReport:
    BLEU_1: float
    BLEU_4: float
    ROUGE_1_P: float
    ROUGE_1_R: float
    ROUGE_1_F: float
    ROUGE_2_P: float
    ROUGE_2_R: float
    ROUGE_2_F: float
    USR: float
    FMR: float
    FCR: float
    DIV: float
    RMSE: float
    MAE: float
    pairs: int
    skipped: dict = field(default_factory=dict)
    div_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        """Aligned text rendering in explainability / text-quality / rating order."""
        cols = [
            ("FMR", self.FMR), ("FCR", self.FCR), ("DIV", self.DIV), ("USR", self.USR),
            ("B1", self.BLEU_1), ("B4", self.BLEU_4),
            ("R1-P", self.ROUGE_1_P), ("R1-R", self.ROUGE_1_R), ("R1-F", self.ROUGE_1_F),
            ("R2-P", self.ROUGE_2_P), ("R2-R", self.ROUGE_2_R), ("R2-F", self.ROUGE_2_F),
            ("RMSE", self.RMSE), ("MAE", self.MAE),
        ]
        head = " ".join(f"{k:>7}" for k, _ in cols)
        vals = " ".join(f"{v:7.2f}" for _, v in cols)
        return head + "\n" + vals


REPORT_SCHEMA = {
    "type": "object",
    "required": [f.name for f in MetricsReport.__dataclass_fields__.values()],
    "properties": {
        **{k: {"type": "number", "minimum": 0} for k in (
            "BLEU_1", "BLEU_4", "ROUGE_1_P", "ROUGE_1_R", "ROUGE_1_F", "ROUGE_2_P", "ROUGE_2_R", "ROUGE_2_F",
            "USR", "FMR", "FCR", "DIV", "RMSE", "MAE")},
        "pairs": {"type": "integer", "minimum": 1},
        "skipped": {"type": "object"},
        "div_seed": {"type": "integer"},
    },
    "additionalProperties": False,
}


def evaluate(
    candidates: Sequence[Sentence],
    references: Sequence[Sentence],
    features: Sequence,
    universe: Sequence,
    r_true: Sequence[float],
    r_pred: Sequence[float],
    pair_budget: int = 1_000_000,
    seed: int = 0,
) -> MetricsReport:
    _check_pairs(candidates, references)
    r1, r2 = rouge_n(candidates, references, 1), rouge_n(candidates, references, 2)
    rmse, mae = rmse_mae(r_true, r_pred)
    return MetricsReport(
        BLEU_1=bleu_n(candidates, references, 1),
        BLEU_4=bleu_n(candidates, references, 4),
        ROUGE_1_P=r1.precision, ROUGE_1_R=r1.recall, ROUGE_1_F=r1.f1,
        ROUGE_2_P=r2.precision, ROUGE_2_R=r2.recall, ROUGE_2_F=r2.f1,
        USR=usr(candidates),
        FMR=fmr(candidates, features),
        FCR=fcr(candidates, universe),
        DIV=div(candidates, universe, pair_budget, seed) if len(candidates) > 1 else 0.0,
        RMSE=rmse,
        MAE=mae,
        pairs=len(candidates),
        skipped={"rouge_1": r1.skipped, "rouge_2": r2.skipped, "empty_candidates": sum(1 for c in candidates if not c)},
        div_seed=seed,
    )


def evaluate_generations(rows, universe: Sequence, pair_budget: int = 1_000_000, seed: int = 0) -> MetricsReport:
    """Score :class:`peter.inference.GenerationResult` rows."""
    if not rows:
        raise ValueError("no generations to evaluate")
    return evaluate(
        [r.generated.split() for r in rows],
        [r.reference.split() for r in rows],
        [r.feature for r in rows],
        universe,
        [r.rating_true for r in rows],
        [r.rating_pred for r in rows],
        pair_budget,
        seed,
    )
