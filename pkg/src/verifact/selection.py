"""Pointwise evidence-sentence selection.

Each (claim, candidate sentence) pair is encoded and a small head scores how
likely the sentence is evidence. Training pairs come from the gold evidence
plus sampled negatives: r = 2x(true evidence count) non-evidence sentences
per gold document and two per retrieved document, without duplicates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .corpus import Claim, Corpus, CorpusValidationError, Document, title_prefixed
from .encoder import EncoderConfig, EncoderParams, Vocabulary, encode_pair
from .tensor import ContractError, Tensor, add_row, matmul, no_grad, pick, softmax


@dataclass
class Mlp:
    """Two affine maps with tanh between; dropout (train mode) on the hidden."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, d_in: int, d_hidden: int, d_out: int,
               rng: np.random.Generator, std: float = 0.02) -> "Mlp":
        return cls(
            w1=Tensor(rng.normal(0.0, std, size=(d_in, d_hidden)), requires_grad=True),
            b1=Tensor(np.zeros(d_hidden), requires_grad=True),
            w2=Tensor(rng.normal(0.0, std, size=(d_hidden, d_out)), requires_grad=True),
            b2=Tensor(np.zeros(d_out), requires_grad=True),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2

    def apply(self, x: Tensor, dropout_p: float = 0.0,
              rng: np.random.Generator | None = None, train: bool = False) -> Tensor:
        hidden = T.tanh(add_row(matmul(x, self.w1), self.b1))
        hidden = T.dropout(hidden, dropout_p, rng, train)
        return add_row(matmul(hidden, self.w2), self.b2)


class Origin(Enum):
    GOLD_DOC = "gold"
    RETRIEVED_DOC = "retrieved"


@dataclass(frozen=True)
class SelectionExample:
    claim_id: int
    claim_text: str
    doc_id: str
    sent_idx: int
    sentence_text: str
    z: int                      # +1 evidence, -1 sampled negative
    origin: Origin

    def __post_init__(self):
        if self.z not in (-1, 1):
            raise ContractError(f"selection label must be -1 or +1, got {self.z}")


@dataclass
class SelectorParams:
    encoder: EncoderParams
    head: Mlp

    @classmethod
    def create(cls, config: EncoderConfig, vocab: Vocabulary,
               rng: np.random.Generator, std: float = 0.02,
               attn_identity: float = 0.0, attn_copy: float = 0.0) -> "SelectorParams":
        return cls(
            encoder=EncoderParams.create(config, vocab, rng, std=std,
                                         attn_identity=attn_identity,
                                         attn_copy=attn_copy),
            head=Mlp.create(config.width, config.width, 2, rng, std=std),
        )

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.encoder.named("encoder")
        yield from self.head.named("head")


def selection_prob(claim_text: str, sentence_text: str, params: SelectorParams,
                   dropout_p: float = 0.0, rng: np.random.Generator | None = None,
                   train: bool = False) -> Tensor:
    """(not-evidence, evidence) probability pair, shape 1x2."""
    enc = encode_pair(claim_text, sentence_text, params.encoder,
                      dropout_p=dropout_p, rng=rng, train=train)
    logits = params.head.apply(enc.cls_vec, dropout_p=dropout_p, rng=rng, train=train)
    return softmax(logits)


def selection_loss(example: SelectionExample, params: SelectorParams,
                   dropout_p: float = 0.0, rng: np.random.Generator | None = None,
                   train: bool = False) -> Tensor:
    """Negative log-probability of the example's label."""
    probs = selection_prob(example.claim_text, example.sentence_text, params,
                           dropout_p=dropout_p, rng=rng, train=train)
    idx = 1 if example.z == 1 else 0
    return -T.log(pick(probs, (0, idx)))


def _draw_without_replacement(rng: np.random.Generator, pool: list[int], k: int) -> list[int]:
    """Partial Fisher-Yates with integer draws only."""
    pool = list(pool)
    for j in range(k):
        swap = j + int(rng.integers(0, len(pool) - j))
        pool[j], pool[swap] = pool[swap], pool[j]
    return pool[:k]


def sample_training_set(claim: Claim, documents: dict[str, Document],
                        retrieved_ids: Sequence[str],
                        rng: np.random.Generator) -> list[SelectionExample]:
    """Positives plus per-document negative samples for one claim.

    Gold documents each contribute min(r, available) negatives where
    r = 2x(true evidence count); retrieved documents each contribute
    min(2, available) more, skipping anything already taken, so a document
    that is both gold and retrieved yields at most min(r + 2, available).
    """
    evidence = claim.evidence_pairs()
    examples: list[SelectionExample] = []

    def add(doc_id: str, sent_idx: int, z: int, origin: Origin) -> None:
        doc = documents.get(doc_id)
        if doc is None:
            raise CorpusValidationError(f"claim {claim.claim_id}: document {doc_id!r} missing")
        examples.append(SelectionExample(
            claim_id=claim.claim_id, claim_text=claim.text,
            doc_id=doc_id, sent_idx=sent_idx,
            sentence_text=title_prefixed(doc, sent_idx), z=z, origin=origin,
        ))

    for doc_id, sent_idx in sorted(evidence):
        add(doc_id, sent_idx, +1, Origin.GOLD_DOC)

    r = 2 * len(evidence)
    taken: set[tuple[str, int]] = set()
    for doc_id in claim.gold_doc_ids():
        doc = documents.get(doc_id)
        if doc is None:
            raise CorpusValidationError(f"claim {claim.claim_id}: document {doc_id!r} missing")
        pool = [i for i in range(len(doc.sentences)) if (doc_id, i) not in evidence]
        for i in _draw_without_replacement(rng, pool, min(r, len(pool))):
            taken.add((doc_id, i))
            add(doc_id, i, -1, Origin.GOLD_DOC)
    for doc_id in retrieved_ids:
        doc = documents.get(doc_id)
        if doc is None:
            raise CorpusValidationError(f"claim {claim.claim_id}: document {doc_id!r} missing")
        pool = [i for i in range(len(doc.sentences))
                if (doc_id, i) not in evidence and (doc_id, i) not in taken]
        for i in _draw_without_replacement(rng, pool, min(2, len(pool))):
            taken.add((doc_id, i))
            add(doc_id, i, -1, Origin.RETRIEVED_DOC)
    return examples


@dataclass(frozen=True)
class RankedSentence:
    doc_id: str
    sent_idx: int
    score: float


def candidate_sentences(corpus: Corpus, claim: Claim) -> list[tuple[str, int, str]]:
    """All sentences of the claim's retrieved documents, title-prefixed."""
    out = []
    for doc_id in corpus.retrievals.get(claim.claim_id, []):
        doc = corpus.documents[doc_id]
        for i in range(len(doc.sentences)):
            out.append((doc_id, i, title_prefixed(doc, i)))
    return out


def select_top_m(claim_text: str, candidates: Sequence[tuple[str, int, str]],
                 params: SelectorParams, m: int) -> list[RankedSentence]:
    """Highest-scoring m candidates, ties broken by (doc_id, sent_idx)."""
    if m < 1:
        raise ContractError(f"m must be >= 1, got {m}")
    scored = []
    with no_grad():
        for doc_id, sent_idx, text in candidates:
            p = selection_prob(claim_text, text, params)
            scored.append(RankedSentence(doc_id, sent_idx, float(p.data[0, 1])))
    scored.sort(key=lambda r: (-r.score, r.doc_id, r.sent_idx))
    return scored[:m]


def write_rankings(path, rankings: dict[int, list[RankedSentence]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for claim_id, ranked in rankings.items():
            obj = {"id": claim_id, "ranked": [
                {"doc_id": r.doc_id, "sent_idx": r.sent_idx, "score": r.score}
                for r in ranked
            ]}
            fh.write(json.dumps(obj) + "\n")


def read_rankings(path) -> dict[int, list[RankedSentence]]:
    path = Path(path)
    out: dict[int, list[RankedSentence]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out[obj["id"]] = [
                    RankedSentence(str(r["doc_id"]), int(r["sent_idx"]), float(r["score"]))
                    for r in obj["ranked"]
                ]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise CorpusValidationError(f"{path}:{lineno}: bad ranking record") from None
    return out
