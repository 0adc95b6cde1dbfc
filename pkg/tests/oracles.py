"""Independent brute-force references used to check the similarity pipeline.

Deliberately written from scratch with naive algorithms (quadratic block
scan, recursive matching, manual token counting) so agreement with the
production implementations is meaningful.
"""

from __future__ import annotations

import math
import unicodedata

REMOVED_SYMBOLS = frozenset("#$+<=>|~")


def brute_normalize(text: str) -> str:
    out = []
    for ch in text.lower():
        if ch in REMOVED_SYMBOLS:
            continue
        if unicodedata.category(ch)[0] == "P":
            continue
        out.append(ch)
    words = "".join(out).split()
    return " ".join(words)


def brute_jaccard(a: str, b: str) -> float:
    tokens_a = []
    for tok in a.split():
        if tok not in tokens_a:
            tokens_a.append(tok)
    tokens_b = []
    for tok in b.split():
        if tok not in tokens_b:
            tokens_b.append(tok)
    if not tokens_a and not tokens_b:
        return 1.0
    inter = sum(1 for tok in tokens_a if tok in tokens_b)
    union = len(tokens_a) + sum(1 for tok in tokens_b if tok not in tokens_a)
    return inter / union


def _longest_block(a: str, b: str) -> tuple[int, int, int]:
    """Longest common contiguous block; earliest in a, then earliest in b."""
    best_i = best_j = best_k = 0
    for i in range(len(a)):
        for j in range(len(b)):
            k = 0
            while i + k < len(a) and j + k < len(b) and a[i + k] == b[j + k]:
                k += 1
            if k > best_k:
                best_i, best_j, best_k = i, j, k
    return best_i, best_j, best_k


def _matched_total(a: str, b: str) -> int:
    i, j, k = _longest_block(a, b)
    if k == 0:
        return 0
    return k + _matched_total(a[:i], b[:j]) + _matched_total(a[i + k:], b[j + k:])


def brute_gestalt(a: str, b: str) -> float:
    """Symmetric gestalt ratio: operands compared in lexicographic order."""
    if a > b:
        a, b = b, a
    if not a and not b:
        return 1.0
    return 2.0 * _matched_total(a, b) / (len(a) + len(b))


def brute_soft_sim(a: str, b: str, jaccard_w: float = 0.4, seq_w: float = 0.6) -> float:
    na, nb = brute_normalize(a), brute_normalize(b)
    return jaccard_w * brute_jaccard(na, nb) + seq_w * brute_gestalt(na, nb)


def brute_haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Law-of-cosines great-circle distance (different route than haversine)."""
    if (lat1, lon1) == (lat2, lon2):
        return 0.0
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dl = math.radians(lon2 - lon1)
    central = math.acos(
        min(1.0, max(-1.0, math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(dl)))
    )
    return 6371000.0 * central
