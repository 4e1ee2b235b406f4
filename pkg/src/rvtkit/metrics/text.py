"""Text metrics: BLEU-4, ROUGE-L, CIDEr-D, and BERTScore.

One normalization for all four: lowercase, punctuation characters removed,
whitespace tokenization. Empty candidates score 0 with a warning; empty
references are a caller error — there is nothing coherent to score against.
"""

from __future__ import annotations

import logging
import math
import string
from collections import Counter
from dataclasses import dataclass
from typing import Any, Mapping, Sequence, Union

import numpy as np

from ..dtcore import ArgumentError

logger = logging.getLogger(__name__)

References = Union[str, Sequence[str]]

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_CIDER_SIGMA = 6.0
_NGRAM_ORDERS = 4


def normalize_text(text: str) -> list[str]:
    """Lowercase, strip punctuation characters, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


def _reference_tokens(references: References) -> list[list[str]]:
    refs = [references] if isinstance(references, str) else list(references)
    if not refs:
        raise ArgumentError("at least one reference is required")
    token_lists = []
    for ref in refs:
        tokens = normalize_text(ref)
        if not tokens:
            raise ArgumentError("reference text is empty after normalization")
        token_lists.append(tokens)
    return token_lists


def _empty_candidate(metric: str) -> float:
    logger.warning("%s: empty candidate scored 0", metric)
    return 0.0


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU-4 ---------------------------------------------------------------------


def bleu4(candidate: str, references: References) -> float:
    """Geometric mean of 1-4-gram precisions with a brevity penalty.

    Orders above 1 get add-one smoothing, so an exact copy of a reference
    (four tokens or longer) still scores exactly 1.0; a zero unigram overlap
    zeroes the whole score before smoothing can soften it.
    """
    refs = _reference_tokens(references)
    cand = normalize_text(candidate)
    if not cand:
        return _empty_candidate("bleu4")
    log_precision_sum = 0.0
    for n in range(1, _NGRAM_ORDERS + 1):
        counts = _ngrams(cand, n)
        total = sum(counts.values())
        ceiling: Counter = Counter()
        for ref in refs:
            for gram, count in _ngrams(ref, n).items():
                if count > ceiling[gram]:
                    ceiling[gram] = count
        matched = sum(min(count, ceiling[gram]) for gram, count in counts.items())
        if n == 1:
            if matched == 0:
                return 0.0
            precision = matched / total
        else:
            precision = (matched + 1) / (total + 1)
        log_precision_sum += math.log(precision)
    cand_len = len(cand)
    ref_len = min((abs(len(r) - cand_len), len(r)) for r in refs)[1]
    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_precision_sum / _NGRAM_ORDERS)


# -- ROUGE-L ---------------------------------------------------------------------


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    row = [0] * (len(b) + 1)
    for token in a:
        prev_diag = 0
        for j, other in enumerate(b, start=1):
            prev_row = row[j]
            row[j] = prev_diag + 1 if token == other else max(row[j - 1], row[j])
            prev_diag = prev_row
    return row[-1]


def rouge_l(candidate: str, reference: str, beta: float = 1.2) -> float:
    """Longest-common-subsequence F-score, recall-weighted by beta."""
    ref = _reference_tokens(reference)[0]
    cand = normalize_text(candidate)
    if not cand:
        return _empty_candidate("rouge_l")
    lcs = _lcs_len(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    beta_sq = beta * beta
    return (1 + beta_sq) * precision * recall / (recall + beta_sq * precision)


# -- CIDEr-D ---------------------------------------------------------------------


@dataclass(frozen=True)
class CiderIdf:
    """Corpus n-gram document frequencies backing CIDEr-D's tf-idf weights."""

    doc_freq: Mapping[tuple[str, ...], int]
    num_docs: int


def build_cider_idf(reference_corpus: Sequence[References]) -> CiderIdf:
    """One corpus document per sample's reference set."""
    doc_freq: Counter = Counter()
    num_docs = 0
    for references in reference_corpus:
        num_docs += 1
        seen: set[tuple[str, ...]] = set()
        for tokens in _reference_tokens(references):
            for n in range(1, _NGRAM_ORDERS + 1):
                seen.update(_ngrams(tokens, n))
        doc_freq.update(seen)
    if num_docs == 0:
        raise ArgumentError("reference corpus is empty")
    return CiderIdf(doc_freq=dict(doc_freq), num_docs=num_docs)


def _cider_vector(
    tokens: Sequence[str], idf: CiderIdf
) -> tuple[list[dict[tuple[str, ...], float]], list[float], int]:
    log_num_docs = math.log(float(idf.num_docs))
    vectors: list[dict[tuple[str, ...], float]] = []
    norms: list[float] = []
    for n in range(1, _NGRAM_ORDERS + 1):
        vec = {}
        for gram, count in _ngrams(tokens, n).items():
            df = math.log(max(1.0, float(idf.doc_freq.get(gram, 0))))
            vec[gram] = count * (log_num_docs - df)
        vectors.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vectors, norms, len(tokens)


def cider_d(candidate: str, references: References, corpus: CiderIdf) -> float:
    """CIDEr-D for one candidate, in the metric's native 0-10 range."""
    refs = _reference_tokens(references)
    cand = normalize_text(candidate)
    if not cand:
        return _empty_candidate("cider")
    cand_vec, cand_norm, cand_len = _cider_vector(cand, corpus)
    order_sums = [0.0] * _NGRAM_ORDERS
    for ref in refs:
        ref_vec, ref_norm, ref_len = _cider_vector(ref, corpus)
        penalty = math.exp(-((cand_len - ref_len) ** 2) / (2.0 * _CIDER_SIGMA**2))
        for n in range(_NGRAM_ORDERS):
            overlap = sum(
                min(weight, ref_vec[n].get(gram, 0.0)) * ref_vec[n].get(gram, 0.0)
                for gram, weight in cand_vec[n].items()
            )
            if cand_norm[n] != 0.0 and ref_norm[n] != 0.0:
                overlap /= cand_norm[n] * ref_norm[n]
            order_sums[n] += overlap * penalty
    return 10.0 * (sum(order_sums) / _NGRAM_ORDERS) / len(refs)


def cider(
    candidates: Sequence[str],
    references: Sequence[References],
    corpus: CiderIdf | None = None,
) -> float:
    """Corpus-level mean CIDEr-D; the IDF comes from `references` when absent."""
    if len(candidates) != len(references):
        raise ArgumentError(
            f"{len(candidates)} candidates against {len(references)} reference sets"
        )
    if not candidates:
        raise ArgumentError("nothing to score")
    corpus = corpus or build_cider_idf(references)
    return sum(cider_d(c, r, corpus) for c, r in zip(candidates, references)) / len(candidates)


# -- BERTScore ---------------------------------------------------------------------


def bertscore(candidate: str, reference: str, embedder: Any) -> float:
    """Greedy token-matching F1 over embedder vectors, no baseline rescaling."""
    ref = _reference_tokens(reference)[0]
    cand = normalize_text(candidate)
    if not cand:
        return _empty_candidate("bertscore")
    vocabulary = sorted(set(cand) | set(ref))
    vectors = np.asarray(embedder.embed(vocabulary), dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    units = vectors / norms
    lookup = {token: units[i] for i, token in enumerate(vocabulary)}
    similarities = np.clip(
        np.stack([lookup[t] for t in cand]) @ np.stack([lookup[t] for t in ref]).T, -1.0, 1.0
    )
    precision = float(similarities.max(axis=1).mean())
    recall = float(similarities.max(axis=0).mean())
    if precision + recall <= 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)
