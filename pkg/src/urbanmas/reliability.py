"""Hybrid soft similarity and the consistency gate between extraction variants.

Two independently generated extraction variants are compared field by field.
Texts are normalized (lowercased, punctuation stripped, whitespace collapsed)
and scored with a weighted blend of token-set Jaccard overlap (weight 0.4)
and gestalt sequence matching (weight 0.6). Fields scoring below the 0.72
stability threshold are regenerated one at a time; everything at or above
the gate is byte-preserved from variant A.

Normalization removes exactly: every character whose Unicode general
category starts with ``P`` (all punctuation categories), plus the symbols
``# $ + < = > | ~``. No other characters are touched.

The gestalt ratio follows Ratcliff/Obershelp matching: recursively find the
longest common contiguous block (ties broken by earliest position in the
first operand, then in the second) and match the flanking regions, giving
2*M / (len(a) + len(b)). Raw gestalt matching is order-dependent, so the
operands are evaluated in lexicographic order to make the score symmetric.
"""

from __future__ import annotations

import logging
import unicodedata
from dataclasses import dataclass
from difflib import SequenceMatcher
from typing import Callable, Mapping

from .domain import FieldValue, SimilarityReport, UrbanInfoRecord
from .errors import FieldKeyMismatchError, RefinerError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.72
DEFAULT_JACCARD_WEIGHT = 0.4
DEFAULT_SEQ_WEIGHT = 0.6
DEFAULT_MAX_REPAIR_ROUNDS = 2

# Symbol characters removed alongside Unicode P* during normalization.
_EXTRA_PUNCTUATION = set("#$+<=>|~")


@dataclass(frozen=True)
class ReliabilityConfig:
    """Gate threshold, similarity weights and the repair budget."""

    threshold: float = DEFAULT_THRESHOLD
    jaccard_weight: float = DEFAULT_JACCARD_WEIGHT
    seq_weight: float = DEFAULT_SEQ_WEIGHT
    max_repair_rounds: int = DEFAULT_MAX_REPAIR_ROUNDS

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must be in (0, 1]: {self.threshold}")
        if abs(self.jaccard_weight + self.seq_weight - 1.0) > 1e-12:
            raise ValueError("jaccard_weight + seq_weight must equal 1.0")
        if self.max_repair_rounds < 1:
            raise ValueError("max_repair_rounds must be >= 1")

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "jaccard_weight": self.jaccard_weight,
            "seq_weight": self.seq_weight,
            "max_repair_rounds": self.max_repair_rounds,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ReliabilityConfig":
        return cls(
            threshold=float(data.get("threshold", DEFAULT_THRESHOLD)),
            jaccard_weight=float(data.get("jaccard_weight", DEFAULT_JACCARD_WEIGHT)),
            seq_weight=float(data.get("seq_weight", DEFAULT_SEQ_WEIGHT)),
            max_repair_rounds=int(data.get("max_repair_rounds", DEFAULT_MAX_REPAIR_ROUNDS)),
        )


def _is_removed(ch: str) -> bool:
    return ch in _EXTRA_PUNCTUATION or unicodedata.category(ch).startswith("P")


def normalize(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace. Idempotent."""
    kept = [ch for ch in text.lower() if not _is_removed(ch)]
    return " ".join("".join(kept).split())


def jaccard(a: str, b: str) -> float:
    """Token-set overlap of two already-normalized texts.

    Plain set semantics over whitespace tokens; two empty token sets
    count as identical (1.0).
    """
    tokens_a = set(a.split())
    tokens_b = set(b.split())
    if not tokens_a and not tokens_b:
        return 1.0
    union = tokens_a | tokens_b
    return len(tokens_a & tokens_b) / len(union)


def seq_ratio(a: str, b: str) -> float:
    """Gestalt (Ratcliff/Obershelp) similarity of two already-normalized texts.

    Operands are compared in lexicographic order so the score is symmetric
    despite the algorithm's order-dependent tie-breaking.
    """
    if a > b:
        a, b = b, a
    if not a and not b:
        return 1.0
    return SequenceMatcher(None, a, b, autojunk=False).ratio()


def soft_sim(a: str, b: str, cfg: ReliabilityConfig | None = None) -> float:
    """Hybrid soft similarity: weighted Jaccard + gestalt ratio over normalized inputs."""
    cfg = cfg or ReliabilityConfig()
    na, nb = normalize(a), normalize(b)
    return cfg.jaccard_weight * jaccard(na, nb) + cfg.seq_weight * seq_ratio(na, nb)


def evaluate(
    var_a: UrbanInfoRecord,
    var_b: UrbanInfoRecord,
    cfg: ReliabilityConfig | None = None,
) -> SimilarityReport:
    """Score two variants field by field and flag the conflicting fields."""
    cfg = cfg or ReliabilityConfig()
    if var_a.field_names != var_b.field_names:
        raise FieldKeyMismatchError(
            f"variant field keys differ: {var_a.field_names} vs {var_b.field_names}"
        )
    per_field = {
        name: soft_sim(var_a.fields[name].text, var_b.fields[name].text, cfg)
        for name in var_a.field_names
    }
    return SimilarityReport.from_scores(per_field, cfg.threshold)


RefineFn = Callable[[str, str, str], str]


def reconcile(
    var_a: UrbanInfoRecord,
    var_b: UrbanInfoRecord,
    report: SimilarityReport,
    refine_fn: RefineFn,
    cfg: ReliabilityConfig | None = None,
) -> UrbanInfoRecord:
    """Settle variant A into a reliable record, repairing only conflicts.

    With no conflicting fields variant A is accepted as-is (status
    ``stable``). Otherwise each conflicting field is regenerated through
    ``refine_fn(field_name, value_a, value_b)`` and re-scored against
    variant A's value, up to ``cfg.max_repair_rounds`` times; later rounds
    pass the previous refinement as the competing value. Fields that never
    reach the threshold keep their last refined text and the record settles
    as ``low_confidence``. Non-conflicting fields are byte-preserved.
    """
    cfg = cfg or ReliabilityConfig()
    if not report.conflicting:
        fields = {
            name: FieldValue(
                text=value.text,
                provenance=value.provenance,
                similarity=report.per_field[name],
                repair_rounds=0,
            )
            for name, value in var_a.fields.items()
        }
        return var_a.settle("stable", fields)

    fields: dict[str, FieldValue] = {}
    unresolved = 0
    for name, value in var_a.fields.items():
        if name not in report.conflicting:
            fields[name] = FieldValue(
                text=value.text,
                provenance=value.provenance,
                similarity=report.per_field[name],
                repair_rounds=0,
            )
            continue

        competing = var_b.fields[name].text
        refined = value.text
        score = report.per_field[name]
        rounds = 0
        resolved = False
        while rounds < cfg.max_repair_rounds:
            rounds += 1
            try:
                refined = refine_fn(name, value.text, competing)
            except Exception as exc:
                raise RefinerError(f"refiner failed for field {name!r}: {exc}") from exc
            score = soft_sim(refined, value.text, cfg)
            if score >= cfg.threshold:
                resolved = True
                break
            competing = refined
        if not resolved:
            unresolved += 1
            logger.warning(
                "field %r still conflicting after %d repair rounds (score %.3f)",
                name, rounds, score,
            )
        fields[name] = FieldValue(
            text=refined or value.text,
            provenance="refined",
            similarity=score,
            repair_rounds=rounds,
        )

    return var_a.settle("low_confidence" if unresolved else "refined", fields)
