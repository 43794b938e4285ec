"""Verdict scoring: label accuracy, strict evidence-aware score and
sentence-level precision / recall@m / F1.

A claim earns the strict score when its label is right and, unless the gold
label is N, some complete gold evidence group appears inside the predicted
evidence (the first m pairs). Sentence metrics ignore claims whose gold label
is N: those have no evidence to retrieve.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

from .corpus import LABELS, Claim
from .model import Verdict

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ClaimOutcome:
    claim_id: int
    label_correct: bool
    evidence_complete: bool   # vacuously true for gold-N claims


@dataclass
class EvalReport:
    n_claims: int
    m: int
    label_accuracy: float
    strict_score: float
    precision: float
    recall_at_m: float
    f1: float
    per_claim: list[ClaimOutcome]

    def to_dict(self) -> dict:
        return {
            "n_claims": self.n_claims,
            "m": self.m,
            "label_accuracy": self.label_accuracy,
            "strict_score": self.strict_score,
            "precision": self.precision,
            f"recall_at_{self.m}": self.recall_at_m,
            "f1": self.f1,
        }


def _pair_verdicts(gold: list[Claim], predicted: list[Verdict]) -> list[tuple[Claim, Verdict]]:
    by_id: dict[int, Verdict] = {}
    for v in predicted:
        if v.claim_id in by_id:
            raise EvaluationError(f"duplicate verdict for claim {v.claim_id}")
        by_id[v.claim_id] = v
    gold_ids = [c.claim_id for c in gold]
    if len(set(gold_ids)) != len(gold_ids):
        raise EvaluationError("duplicate gold claim ids")
    if set(gold_ids) != set(by_id):
        missing = sorted(set(gold_ids) - set(by_id))[:5]
        extra = sorted(set(by_id) - set(gold_ids))[:5]
        raise EvaluationError(
            f"gold and predicted ids differ (missing {missing}, unexpected {extra})")
    pairs = []
    for c in gold:
        if c.label is None:
            raise EvaluationError(f"claim {c.claim_id} has no gold label")
        if c.label not in LABELS:
            raise EvaluationError(f"claim {c.claim_id}: bad gold label {c.label!r}")
        pairs.append((c, by_id[c.claim_id]))
    return pairs


def _truncated_evidence(verdict: Verdict, m: int) -> list[tuple[str, int]]:
    if len(verdict.evidence) > m:
        log.warning("claim %s: %d predicted evidence pairs, scoring the first %d",
                    verdict.claim_id, len(verdict.evidence), m)
        return list(verdict.evidence[:m])
    return list(verdict.evidence)


def _group_satisfied(claim: Claim, predicted_pairs: list[tuple[str, int]]) -> bool:
    pred = set(predicted_pairs)
    return any(set(group) <= pred for group in claim.evidence_groups)


def build_report(gold: list[Claim], predicted: list[Verdict], m: int = 5) -> EvalReport:
    """Score all metrics in one pass over the paired claims."""
    if m < 1:
        raise EvaluationError(f"m must be >= 1, got {m}")
    pairs = _pair_verdicts(gold, predicted)
    if not pairs:
        raise EvaluationError("nothing to score")
    outcomes: list[ClaimOutcome] = []
    label_hits = 0
    strict_hits = 0
    evidence_tp = 0
    evidence_predicted = 0
    recall_hits = 0
    decidable = 0
    for claim, verdict in pairs:
        pred_pairs = _truncated_evidence(verdict, m)
        label_ok = verdict.label == claim.label
        complete = claim.label == "N" or _group_satisfied(claim, pred_pairs)
        outcomes.append(ClaimOutcome(claim.claim_id, label_ok, complete))
        label_hits += label_ok
        strict_hits += label_ok and complete
        if claim.label != "N":
            decidable += 1
            gold_union = claim.evidence_pairs()
            evidence_tp += sum(1 for p in pred_pairs if p in gold_union)
            evidence_predicted += len(pred_pairs)
            recall_hits += _group_satisfied(claim, pred_pairs)
    n = len(pairs)
    precision = evidence_tp / evidence_predicted if evidence_predicted else 0.0
    recall = recall_hits / decidable if decidable else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return EvalReport(
        n_claims=n,
        m=m,
        label_accuracy=label_hits / n,
        strict_score=strict_hits / n,
        precision=precision,
        recall_at_m=recall,
        f1=f1,
        per_claim=outcomes,
    )


def label_accuracy(gold: list[Claim], predicted: list[Verdict]) -> float:
    return build_report(gold, predicted).label_accuracy


def strict_score(gold: list[Claim], predicted: list[Verdict], m: int = 5) -> float:
    return build_report(gold, predicted, m=m).strict_score


def selection_prf(gold: list[Claim], predicted: list[Verdict],
                  m: int = 5) -> tuple[float, float, float]:
    report = build_report(gold, predicted, m=m)
    return report.precision, report.recall_at_m, report.f1


def format_report(report: EvalReport) -> str:
    rows = [
        ("claims scored", f"{report.n_claims}"),
        ("label accuracy", f"{report.label_accuracy:.4f}"),
        ("strict score", f"{report.strict_score:.4f}"),
        ("evidence precision", f"{report.precision:.4f}"),
        (f"evidence recall@{report.m}", f"{report.recall_at_m:.4f}"),
        ("evidence f1", f"{report.f1:.4f}"),
    ]
    name_w = max(len(name) for name, _ in rows)
    val_w = max(len(val) for _, val in rows)
    lines = [f"{'measure':<{name_w}}  {'value':>{val_w}}",
             f"{'-' * name_w}  {'-' * val_w}"]
    lines += [f"{name:<{name_w}}  {val:>{val_w}}" for name, val in rows]
    return "\n".join(lines)


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2)
