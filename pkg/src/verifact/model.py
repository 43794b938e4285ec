"""Veracity classification over selected evidence.

The forward pass stacks four attention levels: per-pair encodings, token-level
self-attention over the concatenated pair states (with fresh sinusoid
positions), sentence-level self-attention over the pair CLS vectors, and a
gated cross-attention that lets the claim query the evidence weighted by the
auxiliary selection scores. A small head turns the attended summary into
(supported, refuted, undecidable) probabilities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .attention import GateStrategy, MhaParams, gated_mha, self_mha
from .corpus import LABELS, LABEL_TO_WIRE, Claim, CorpusValidationError, Document, label_from_wire, title_prefixed
from .encoder import EncoderConfig, EncoderParams, Vocabulary, encode_pair, encode_single
from .selection import Mlp, RankedSentence
from .tensor import (
    ContractError,
    Tensor,
    concat,
    log as t_log,
    no_grad,
    pick,
    rows,
    softmax,
    stack_scalars,
)


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64
    n_heads: int = 4
    depth: int = 2
    max_len: int = 32
    max_sentences: int = 5
    gate_strategy: GateStrategy = GateStrategy.VALUE_ONLY
    dropout: float = 0.1
    aux_weight: float = 1.0          # weight of the selection term in the joint loss
    use_token_attn: bool = True
    use_sent_attn: bool = True
    token_pe: bool = True
    stop_gate_grad: bool = False

    def __post_init__(self):
        if self.max_sentences < 1:
            raise ContractError("max_sentences must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout {self.dropout} outside [0, 1)")
        if self.aux_weight < 0.0:
            raise ContractError("aux_weight must be >= 0")

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, width=self.width,
                             n_heads=self.n_heads, depth=self.depth,
                             max_len=self.max_len)


@dataclass(frozen=True)
class EvidenceSentence:
    doc_id: str
    sent_idx: int
    text: str


@dataclass
class EvidenceSet:
    """Claim plus its ordered evidence sentences (1..max_sentences of them)."""

    claim: Claim
    sentences: list[EvidenceSentence]
    z_labels: list[int] | None = None

    def __post_init__(self):
        if not self.sentences:
            raise ContractError(f"claim {self.claim.claim_id}: empty evidence set")
        if self.z_labels is not None:
            if len(self.z_labels) != len(self.sentences):
                raise ContractError(
                    f"claim {self.claim.claim_id}: {len(self.z_labels)} labels "
                    f"for {len(self.sentences)} sentences")
            if any(z not in (-1, 1) for z in self.z_labels):
                raise ContractError("z labels must be -1 or +1")


def true_evidence_list(claim: Claim) -> list[tuple[str, int]]:
    """Gold pairs in group order, first occurrence wins."""
    out: list[tuple[str, int]] = []
    seen: set[tuple[str, int]] = set()
    for group in claim.evidence_groups:
        for pair in group:
            if pair not in seen:
                seen.add(pair)
                out.append(pair)
    return out


def build_evidence_set(claim: Claim, predicted: Sequence[RankedSentence],
                       documents: dict[str, Document], m: int,
                       training: bool) -> EvidenceSet:
    """Training keeps gold sentences first, then fills with predictions;
    evaluation uses the top-m predictions alone. Duplicates collapse to the
    first occurrence and the list is cut at m."""
    if m < 1:
        raise ContractError(f"m must be >= 1, got {m}")
    gold = true_evidence_list(claim)
    ordered: list[tuple[str, int]] = list(gold) if training else []
    for r in predicted:
        ordered.append((r.doc_id, r.sent_idx))
    seen: set[tuple[str, int]] = set()
    pairs: list[tuple[str, int]] = []
    for pair in ordered:
        if pair not in seen:
            seen.add(pair)
            pairs.append(pair)
    pairs = pairs[:m]
    if not pairs:
        raise ContractError(f"claim {claim.claim_id}: no evidence to build a set from")
    sentences = []
    for doc_id, sent_idx in pairs:
        doc = documents.get(doc_id)
        if doc is None or not 0 <= sent_idx < len(doc.sentences):
            raise CorpusValidationError(
                f"claim {claim.claim_id}: evidence ({doc_id!r}, {sent_idx}) unresolvable")
        sentences.append(EvidenceSentence(doc_id, sent_idx, title_prefixed(doc, sent_idx)))
    gold_set = set(gold)
    z = [1 if p in gold_set else -1 for p in pairs] if training else None
    return EvidenceSet(claim=claim, sentences=sentences, z_labels=z)


@dataclass
class VerifierParams:
    encoder: EncoderParams
    token_mha: MhaParams
    sentence_mha: MhaParams
    cross_mha: MhaParams
    aux_head: Mlp      # selection scores for the gate and the joint loss
    pred_head: Mlp     # 3-way verdict

    @classmethod
    def create(cls, cfg: ModelConfig, vocab: Vocabulary,
               rng: np.random.Generator, std: float = 0.02,
               attn_identity: float = 0.0, attn_copy: float = 0.0) -> "VerifierParams":
        w, n = cfg.width, cfg.n_heads
        return cls(
            encoder=EncoderParams.create(cfg.encoder_config(len(vocab)), vocab, rng,
                                         std=std, attn_identity=attn_identity,
                                         attn_copy=attn_copy),
            token_mha=MhaParams.create(w, n, rng, std=std),
            sentence_mha=MhaParams.create(w, n, rng, std=std),
            cross_mha=MhaParams.create(w, n, rng, std=std),
            aux_head=Mlp.create(w, w, 2, rng, std=std),
            pred_head=Mlp.create(w, w, 3, rng, std=std),
        )

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.encoder.named("encoder")
        yield from self.token_mha.named("token_attn")
        yield from self.sentence_mha.named("sentence_attn")
        yield from self.cross_mha.named("cross_attn")
        yield from self.aux_head.named("aux_head")
        yield from self.pred_head.named("pred_head")


@dataclass
class ForwardResult:
    label_probs: Tensor              # 1 x 3 over (S, R, N)
    gate_scores: Tensor              # rank 1, one score per sentence
    sentence_probs: list[Tensor]     # 1 x 2 auxiliary (not-evidence, evidence)
    summary: Tensor                  # 1 x width attended evidence summary


def forward(ev: EvidenceSet, params: VerifierParams, cfg: ModelConfig,
            rng: np.random.Generator | None = None, train: bool = False) -> ForwardResult:
    if len(ev.sentences) > cfg.max_sentences:
        raise ContractError(
            f"claim {ev.claim.claim_id}: {len(ev.sentences)} sentences exceed "
            f"max_sentences {cfg.max_sentences}")
    drop = cfg.dropout if train else 0.0
    encs = [encode_pair(ev.claim.text, s.text, params.encoder,
                        dropout_p=drop, rng=rng, train=train)
            for s in ev.sentences]
    seq_len = params.encoder.config.max_len

    hidden = concat([e.hidden for e in encs], axis=0)
    if cfg.use_token_attn:
        mask = np.concatenate([e.mask for e in encs])
        key_mask = mask if not mask.all() else None
        hidden = hidden + self_mha(hidden, params.token_mha, use_pe=cfg.token_pe,
                                   key_mask=key_mask, dropout_p=drop, rng=rng, train=train)

    cls_rows = [rows(hidden, j * seq_len, j * seq_len + 1) for j in range(len(encs))]
    sent_states = concat(cls_rows, axis=0)
    if cfg.use_sent_attn:
        sent_states = sent_states + self_mha(sent_states, params.sentence_mha, use_pe=False,
                                             dropout_p=drop, rng=rng, train=train)

    sentence_probs = [
        softmax(params.aux_head.apply(e.cls_vec, dropout_p=drop, rng=rng, train=train))
        for e in encs
    ]
    gate = stack_scalars([pick(p, (0, 1)) for p in sentence_probs])
    if cfg.stop_gate_grad:
        gate = gate.detach()

    claim_vec = encode_single(ev.claim.text, params.encoder,
                              dropout_p=drop, rng=rng, train=train)
    summary = claim_vec + gated_mha(claim_vec, sent_states, sent_states, gate,
                                    params.cross_mha, cfg.gate_strategy,
                                    dropout_p=drop, rng=rng, train=train)
    logits = params.pred_head.apply(summary, dropout_p=drop, rng=rng, train=train)
    return ForwardResult(
        label_probs=softmax(logits),
        gate_scores=gate,
        sentence_probs=sentence_probs,
        summary=summary,
    )


# -- losses --------------------------------------------------------------


@dataclass(frozen=True)
class ClassWeights:
    """Inverse-frequency label weights, normalized to sum to 1."""

    beta: dict[str, float]

    def __post_init__(self):
        if set(self.beta) != set(LABELS):
            raise ContractError(f"weights must cover {LABELS}")


def compute_class_weights(counts: dict[str, int]) -> ClassWeights:
    """beta_y proportional to total / (3 * count_y), normalized to sum 1."""
    if set(counts) != set(LABELS):
        raise ContractError(f"counts must cover {LABELS}, got {sorted(counts)}")
    if any(c <= 0 for c in counts.values()):
        raise ContractError("every class needs a positive count")
    total = sum(counts.values())
    raw = {y: total / (3.0 * counts[y]) for y in LABELS}
    norm = sum(raw.values())
    return ClassWeights(beta={y: raw[y] / norm for y in LABELS})


def prediction_loss(label_probs: Tensor, label: str,
                    weights: ClassWeights | None) -> Tensor:
    """Class-weighted negative log-likelihood; plain cross-entropy without
    weights."""
    if label not in LABELS:
        raise ContractError(f"unknown label {label!r}")
    if label_probs.shape != (1, 3):
        raise ContractError(f"label_probs must be 1x3, got {label_probs.shape}")
    nll = -t_log(pick(label_probs, (0, LABELS.index(label))))
    return nll * weights.beta[label] if weights is not None else nll


def selection_term(sentence_probs: Sequence[Tensor], z_labels: Sequence[int]) -> Tensor:
    """Sum of per-sentence negative log-likelihoods of the z labels."""
    losses = [
        -t_log(pick(p, (0, 1 if z == 1 else 0)))
        for p, z in zip(sentence_probs, z_labels)
    ]
    total = losses[0]
    for term in losses[1:]:
        total = total + term
    return total


def joint_loss(ev: EvidenceSet, params: VerifierParams, cfg: ModelConfig,
               weights: ClassWeights | None,
               rng: np.random.Generator | None = None, train: bool = True) -> Tensor:
    """Prediction loss plus aux_weight times the selection term."""
    if ev.claim.label is None:
        raise ContractError(f"claim {ev.claim.claim_id}: no gold label")
    if ev.z_labels is None:
        raise ContractError(f"claim {ev.claim.claim_id}: no z labels (test-mode set?)")
    result = forward(ev, params, cfg, rng=rng, train=train)
    loss = prediction_loss(result.label_probs, ev.claim.label, weights)
    if cfg.aux_weight != 0.0:
        loss = loss + selection_term(result.sentence_probs, ev.z_labels) * cfg.aux_weight
    return loss


def predict_label(ev: EvidenceSet, params: VerifierParams,
                  cfg: ModelConfig) -> tuple[str, np.ndarray]:
    """Argmax verdict; ties resolve to the earliest of (S, R, N)."""
    with no_grad():
        result = forward(ev, params, cfg, train=False)
    probs = result.label_probs.data[0].copy()
    return LABELS[int(np.argmax(probs))], probs


# -- verdict wire format ---------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    claim_id: int
    label: str
    evidence: list[tuple[str, int]]
    probabilities: tuple[float, float, float]


def write_verdicts(path, verdicts: Sequence[Verdict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in verdicts:
            obj = {
                "id": v.claim_id,
                "predicted_label": LABEL_TO_WIRE[v.label],
                "predicted_evidence": [[d, s] for d, s in v.evidence],
                "probabilities": list(v.probabilities),
            }
            fh.write(json.dumps(obj) + "\n")


def read_verdicts(path) -> list[Verdict]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                probs = obj.get("probabilities", [0.0, 0.0, 0.0])
                out.append(Verdict(
                    claim_id=obj["id"],
                    label=label_from_wire(obj["predicted_label"]),
                    evidence=[(str(d), int(s)) for d, s in obj.get("predicted_evidence", [])],
                    probabilities=tuple(float(p) for p in probs),
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise CorpusValidationError(f"{path}:{lineno}: bad verdict record") from None
    return out
