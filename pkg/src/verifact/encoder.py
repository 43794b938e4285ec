"""Claim/sentence token sequences and a small from-scratch pair encoder.

Sequences follow the [CLS] claim [SEP] sentence [SEP] convention with token,
learned-position and segment embeddings. Blocks are residual self-attention
only: no layer norm, no feed-forward. The CLS vector is row 0 of the hidden
state.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .attention import MhaParams, self_mha
from .tensor import ContractError, DimensionError, Tensor, gather_rows, rows

log = logging.getLogger(__name__)

PAD, CLS, SEP, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<cls>", "<sep>", "<unk>")

_WORD_RE = re.compile(r"\w+|[^\w\s]")


def word_split(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation boundaries."""
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Fixed token-to-id table; ids 0..3 are pad, cls, sep, unk."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise ContractError(f"vocabulary must start with {SPECIAL_TOKENS}")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None) -> "Vocabulary":
        """Count words over the corpus, order by frequency then alphabetically."""
        counts: dict[str, int] = {}
        for text in texts:
            for tok in word_split(text):
                counts[tok] = counts.get(tok, 0) + 1
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        if max_size is not None:
            ordered = ordered[: max(0, max_size - len(SPECIAL_TOKENS))]
        return cls(list(SPECIAL_TOKENS) + ordered)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(tok, UNK) for tok in word_split(text)]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    width: int
    n_heads: int
    depth: int
    max_len: int

    def __post_init__(self):
        if self.width % self.n_heads != 0:
            raise DimensionError(f"width {self.width} not divisible by {self.n_heads} heads")
        if self.max_len < 4:
            raise ContractError(f"max_len must be >= 4, got {self.max_len}")
        if self.depth < 1:
            raise ContractError(f"depth must be >= 1, got {self.depth}")
        if self.vocab_size <= len(SPECIAL_TOKENS):
            raise ContractError(f"vocab_size {self.vocab_size} leaves no room for words")


@dataclass
class TokenSequence:
    """Padded id/segment arrays plus a non-pad mask. Position 0 is CLS."""

    ids: np.ndarray
    segments: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def pair_sequence(claim_ids: Sequence[int], sentence_ids: Sequence[int],
                  config: EncoderConfig) -> TokenSequence:
    """[CLS] claim [SEP] sentence [SEP], padded to max_len.

    The claim is capped at max_len - 3 so at least the framing survives; the
    sentence gets whatever budget remains. Exactly two separators always.
    """
    budget = config.max_len - 3
    claim = list(claim_ids)
    if len(claim) > budget:
        log.warning("claim truncated from %d to %d tokens", len(claim), budget)
        claim = claim[:budget]
    sentence = list(sentence_ids)[: budget - len(claim)]
    ids = [CLS, *claim, SEP, *sentence, SEP]
    segments = [0] * (len(claim) + 2) + [1] * (len(sentence) + 1)
    used = len(ids)
    pad_n = config.max_len - used
    ids += [PAD] * pad_n
    segments += [0] * pad_n
    mask = [True] * used + [False] * pad_n
    return TokenSequence(
        ids=np.asarray(ids, dtype=np.int64),
        segments=np.asarray(segments, dtype=np.int64),
        mask=np.asarray(mask, dtype=bool),
    )


def single_sequence(claim_ids: Sequence[int], config: EncoderConfig) -> TokenSequence:
    """[CLS] claim [SEP] without padding (used for the standalone claim vector)."""
    claim = list(claim_ids)[: config.max_len - 2]
    ids = [CLS, *claim, SEP]
    return TokenSequence(
        ids=np.asarray(ids, dtype=np.int64),
        segments=np.zeros(len(ids), dtype=np.int64),
        mask=np.ones(len(ids), dtype=bool),
    )


@dataclass
class EncoderParams:
    config: EncoderConfig
    vocab: Vocabulary
    tok_emb: Tensor
    pos_emb: Tensor
    seg_emb: Tensor
    blocks: list[MhaParams] = field(default_factory=list)

    @classmethod
    def create(cls, config: EncoderConfig, vocab: Vocabulary,
               rng: np.random.Generator, std: float = 0.02,
               attn_identity: float = 0.0, attn_copy: float = 0.0) -> "EncoderParams":
        if len(vocab) != config.vocab_size:
            raise DimensionError(f"vocab has {len(vocab)} tokens, config says {config.vocab_size}")
        emb = lambda rows_, cols, s=std: Tensor(rng.normal(0.0, s, size=(rows_, cols)),
                                                requires_grad=True)
        # position/segment offsets stay small regardless of std so a token's
        # representation is dominated by its identity, not where it sits
        offset = min(std, 0.02)
        return cls(
            config=config,
            vocab=vocab,
            tok_emb=emb(config.vocab_size, config.width),
            pos_emb=emb(config.max_len, config.width, offset),
            seg_emb=emb(2, config.width, offset),
            blocks=[MhaParams.create(config.width, config.n_heads, rng,
                                     std=std, identity_gain=attn_identity,
                                     copy_gain=attn_copy)
                    for _ in range(config.depth)],
        )

    def named(self, prefix: str = "encoder") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.tok_emb", self.tok_emb
        yield f"{prefix}.pos_emb", self.pos_emb
        yield f"{prefix}.seg_emb", self.seg_emb
        for i, block in enumerate(self.blocks):
            yield from block.named(f"{prefix}.block{i}")


@dataclass
class PairEncoding:
    hidden: Tensor        # max_len x width
    cls_vec: Tensor       # 1 x width, equals hidden row 0
    mask: np.ndarray      # non-pad positions


def encode_tokens(seq: TokenSequence, params: EncoderParams,
                  dropout_p: float = 0.0, rng: np.random.Generator | None = None,
                  train: bool = False) -> Tensor:
    """Embed a token sequence and run the residual self-attention stack."""
    t = len(seq)
    if t > params.config.max_len:
        raise DimensionError(f"sequence length {t} exceeds max_len {params.config.max_len}")
    hidden = gather_rows(params.tok_emb, seq.ids)
    hidden = hidden + rows(params.pos_emb, 0, t)
    hidden = hidden + gather_rows(params.seg_emb, seq.segments)
    key_mask = seq.mask if not seq.mask.all() else None
    for block in params.blocks:
        hidden = hidden + self_mha(hidden, block, use_pe=False, key_mask=key_mask,
                                   dropout_p=dropout_p, rng=rng, train=train)
    return hidden


def encode_pair(claim_text: str, sentence_text: str, params: EncoderParams,
                dropout_p: float = 0.0, rng: np.random.Generator | None = None,
                train: bool = False) -> PairEncoding:
    seq = pair_sequence(params.vocab.encode(claim_text),
                        params.vocab.encode(sentence_text), params.config)
    hidden = encode_tokens(seq, params, dropout_p=dropout_p, rng=rng, train=train)
    return PairEncoding(hidden=hidden, cls_vec=rows(hidden, 0, 1), mask=seq.mask)


def encode_single(claim_text: str, params: EncoderParams,
                  dropout_p: float = 0.0, rng: np.random.Generator | None = None,
                  train: bool = False) -> Tensor:
    """CLS vector of [CLS] claim [SEP] alone (1 x width)."""
    seq = single_sequence(params.vocab.encode(claim_text), params.config)
    hidden = encode_tokens(seq, params, dropout_p=dropout_p, rng=rng, train=train)
    return rows(hidden, 0, 1)
