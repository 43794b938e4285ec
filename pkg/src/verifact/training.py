"""Training loops, optimizer, experiment pipeline and ablation grid.

The selector and the verifier share one regimen: per step, average the loss
over a mini-batch by per-example backward passes in a fixed order, clip the
global gradient norm, then apply a moment-based adaptive update at a linear
warmup/decay learning rate. All randomness flows through seeded generators
split into named streams, so identical (corpus, config, seed) reruns are
bitwise identical.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .corpus import Claim, Corpus, title_prefixed, validate_corpus
from .encoder import Vocabulary
from .evaluation import EvalReport, build_report
from .model import (
    ClassWeights,
    ModelConfig,
    Verdict,
    VerifierParams,
    build_evidence_set,
    compute_class_weights,
    joint_loss,
    predict_label,
)
from .selection import (
    RankedSentence,
    SelectorParams,
    candidate_sentences,
    sample_training_set,
    select_top_m,
    selection_loss,
)
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

# Stream ids for seeded generators; one per consumer keeps draw order stable
# when any single phase changes.
_SPLIT, _SEL_INIT, _SEL_SAMPLE, _SEL_ORDER, _SEL_DROP = 0, 1, 2, 3, 4
_VER_INIT, _VER_ORDER, _VER_DROP = 5, 6, 7


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the offending optimizer step."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 2e-3
    warmup_ratio: float = 0.06
    grad_clip: float = 1.0
    epochs: int = 3
    seed: int = 0
    joint: bool = True               # False: selection term off, aux head frozen
    use_class_weights: bool = True
    holdout_fraction: float = 0.2
    init_std: float = 0.02
    init_attn_identity: float = 0.0
    init_attn_copy: float = 0.0
    freeze_emb_epochs: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.lr <= 0.0:
            raise ContractError("lr must be positive")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ContractError(f"warmup_ratio {self.warmup_ratio} outside [0, 1)")
        if self.grad_clip <= 0.0:
            raise ContractError("grad_clip must be positive")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ContractError("holdout_fraction must be in [0, 1)")
        if self.init_std <= 0.0:
            raise ContractError("init_std must be positive")
        if self.init_attn_identity < 0.0:
            raise ContractError("init_attn_identity must be >= 0")
        if self.init_attn_copy < 0.0:
            raise ContractError("init_attn_copy must be >= 0")
        if self.freeze_emb_epochs < 0:
            raise ContractError("freeze_emb_epochs must be >= 0")


def config_snapshot(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    """JSON-safe merge of both configs."""
    snap: dict = {}
    for cfg in (model_cfg, train_cfg):
        for name in cfg.__dataclass_fields__:
            value = getattr(cfg, name)
            snap[name] = value.value if hasattr(value, "value") else value
    return snap


@dataclass
class RunRecord:
    kind: str                        # selector | verifier
    config: dict
    epoch_losses: list[float]
    metrics: dict[str, float] = field(default_factory=dict)
    report: dict | None = None
    wall_seconds: float = 0.0
    cell: str | None = None          # ablation grid cell, when applicable

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "cell": self.cell,
            "config": self.config,
            "epoch_losses": self.epoch_losses,
            "metrics": self.metrics,
            "report": self.report,
            "wall_seconds": self.wall_seconds,
        }, indent=2)


def write_run_record(path, record: RunRecord) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(record.to_json() + "\n")


# -- optimizer ------------------------------------------------------------


def lr_schedule(step: float, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr over warmup_ratio * total_steps, then linear
    decay to 0 at total_steps. Continuous and nonnegative."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warmup = cfg.warmup_ratio * total_steps
    if step < warmup:
        return cfg.lr * step / warmup
    if total_steps == warmup:
        return 0.0 if step >= total_steps else cfg.lr
    return cfg.lr * (total_steps - step) / (total_steps - warmup)


def clip_global_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale every gradient by max_norm / norm when the joint norm exceeds
    max_norm; returns the pre-clip norm. Missing gradients count as zero."""
    if max_norm <= 0.0:
        raise ContractError("max_norm must be positive")
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


class Adam:
    """Per-parameter first/second moments with bias correction."""

    def __init__(self, named_params: Iterable[tuple[str, Tensor]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


# -- shared batch loop ----------------------------------------------------


def _run_epochs(items: list, loss_fn, optimizer: Adam, all_params: list[Tensor],
                cfg: TrainConfig, order_rng: np.random.Generator,
                frozen: Sequence[Tensor] = ()) -> list[float]:
    """Mini-batch loop over items; loss_fn(item) must build a scalar loss
    tensor. The schedule is sampled at step midpoints so neither the first
    nor the last update lands on a zero endpoint. Tensors in frozen keep
    their values for the first freeze_emb_epochs epochs. Returns the mean
    per-example loss of each epoch."""
    n = len(items)
    if n == 0:
        raise ContractError("nothing to train on")
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    trainable = [p for _, p in optimizer.params]
    epoch_losses: list[float] = []
    gstep = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        hold = frozen if epoch < cfg.freeze_emb_epochs else ()
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            inv = 1.0 / len(batch)
            for idx in batch:
                loss = loss_fn(items[int(idx)])
                value = float(loss.data.reshape(()))
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {gstep}", step=gstep)
                running += value
                (loss * inv).backward()
            for p in hold:
                p.grad = None
            clip_global_norm(trainable, cfg.grad_clip)
            optimizer.step(lr_schedule(gstep + 0.5, total_steps, cfg))
            for p in all_params:
                p.grad = None
            gstep += 1
        epoch_losses.append(running / n)
    return epoch_losses


# -- data plumbing --------------------------------------------------------


def split_claims(claims: Sequence[Claim], holdout_fraction: float,
                 seed: int) -> tuple[list[Claim], list[Claim]]:
    """Deterministic shuffle split; both halves keep corpus order."""
    if not 0.0 <= holdout_fraction < 1.0:
        raise ContractError("holdout_fraction must be in [0, 1)")
    rng = np.random.default_rng([seed, _SPLIT])
    n_held = int(round(holdout_fraction * len(claims)))
    order = rng.permutation(len(claims))
    held_idx = set(int(i) for i in order[:n_held])
    train = [c for i, c in enumerate(claims) if i not in held_idx]
    held = [c for i, c in enumerate(claims) if i in held_idx]
    return train, held


def build_vocabulary(corpus: Corpus, claims: Sequence[Claim]) -> Vocabulary:
    """Vocabulary over every document sentence (title-prefixed, as the models
    see them) plus the given claims."""
    texts: list[str] = []
    for doc in corpus.documents.values():
        for i in range(len(doc.sentences)):
            texts.append(title_prefixed(doc, i))
    texts.extend(c.text for c in claims)
    return Vocabulary.build(texts)


# -- selector -------------------------------------------------------------


def train_selector(corpus: Corpus, train_claims: Sequence[Claim], vocab: Vocabulary,
                   model_cfg: ModelConfig, cfg: TrainConfig) -> tuple[SelectorParams, RunRecord]:
    t0 = time.perf_counter()
    enc_cfg = model_cfg.encoder_config(len(vocab))
    params = SelectorParams.create(enc_cfg, vocab,
                                   np.random.default_rng([cfg.seed, _SEL_INIT]),
                                   std=cfg.init_std,
                                   attn_identity=cfg.init_attn_identity,
                                   attn_copy=cfg.init_attn_copy)
    sample_rng = np.random.default_rng([cfg.seed, _SEL_SAMPLE])
    examples = []
    for claim in train_claims:
        examples.extend(sample_training_set(
            claim, corpus.documents, corpus.retrievals.get(claim.claim_id, []), sample_rng))
    drop_rng = np.random.default_rng([cfg.seed, _SEL_DROP])

    def loss_fn(example):
        return selection_loss(example, params, dropout_p=model_cfg.dropout,
                              rng=drop_rng, train=True)

    named = list(params.named())
    optimizer = Adam(named)
    emb = params.encoder
    losses = _run_epochs(examples, loss_fn, optimizer, [p for _, p in named],
                         cfg, np.random.default_rng([cfg.seed, _SEL_ORDER]),
                         frozen=(emb.tok_emb, emb.pos_emb, emb.seg_emb))
    record = RunRecord(
        kind="selector",
        config=config_snapshot(model_cfg, cfg),
        epoch_losses=losses,
        metrics={"n_examples": len(examples), "final_loss": losses[-1]},
        wall_seconds=time.perf_counter() - t0,
    )
    log.info("selector: %d examples, loss %.4f -> %.4f, %.1fs",
             len(examples), losses[0], losses[-1], record.wall_seconds)
    return params, record


def rank_all(corpus: Corpus, params: SelectorParams,
             m: int) -> dict[int, list[RankedSentence]]:
    """Top-m selector rankings for every claim in the corpus."""
    return {
        claim.claim_id: select_top_m(
            claim.text, candidate_sentences(corpus, claim), params, m)
        for claim in corpus.claims
    }


# -- verifier -------------------------------------------------------------


def _class_weights_for(claims: Sequence[Claim], cfg: TrainConfig) -> ClassWeights | None:
    if not cfg.use_class_weights:
        return None
    counts = {"S": 0, "R": 0, "N": 0}
    for c in claims:
        if c.label is None:
            raise ContractError(f"claim {c.claim_id}: unlabeled training claim")
        counts[c.label] += 1
    return compute_class_weights(counts)


def train_verifier(corpus: Corpus, train_claims: Sequence[Claim],
                   rankings: dict[int, list[RankedSentence]], vocab: Vocabulary,
                   model_cfg: ModelConfig, cfg: TrainConfig) -> tuple[VerifierParams, RunRecord]:
    """Joint (or prediction-only) training on gold-first evidence sets.

    joint=False zeroes the selection term and freezes the auxiliary head, so
    the flag and a zero selection weight follow the same code path.
    """
    t0 = time.perf_counter()
    effective = model_cfg if cfg.joint else replace(model_cfg, aux_weight=0.0)
    freeze_aux = effective.aux_weight == 0.0
    weights = _class_weights_for(train_claims, cfg)
    params = VerifierParams.create(effective, vocab,
                                   np.random.default_rng([cfg.seed, _VER_INIT]),
                                   std=cfg.init_std,
                                   attn_identity=cfg.init_attn_identity,
                                   attn_copy=cfg.init_attn_copy)
    sets = [
        build_evidence_set(claim, rankings.get(claim.claim_id, []),
                           corpus.documents, effective.max_sentences, training=True)
        for claim in train_claims
    ]
    drop_rng = np.random.default_rng([cfg.seed, _VER_DROP])

    def loss_fn(ev):
        return joint_loss(ev, params, effective, weights, rng=drop_rng, train=True)

    named = list(params.named())
    trainable = [(n, p) for n, p in named
                 if not (freeze_aux and n.startswith("aux_head."))]
    optimizer = Adam(trainable)
    emb = params.encoder
    losses = _run_epochs(sets, loss_fn, optimizer, [p for _, p in named],
                         cfg, np.random.default_rng([cfg.seed, _VER_ORDER]),
                         frozen=(emb.tok_emb, emb.pos_emb, emb.seg_emb))
    record = RunRecord(
        kind="verifier",
        config=config_snapshot(effective, cfg),
        epoch_losses=losses,
        metrics={"n_claims": len(sets), "final_loss": losses[-1]},
        wall_seconds=time.perf_counter() - t0,
    )
    log.info("verifier: %d claims, loss %.4f -> %.4f, %.1fs",
             len(sets), losses[0], losses[-1], record.wall_seconds)
    return params, record


def predict_claims(corpus: Corpus, claims: Sequence[Claim],
                   rankings: dict[int, list[RankedSentence]],
                   params: VerifierParams, model_cfg: ModelConfig) -> list[Verdict]:
    """Test-mode verdicts: top-m predicted evidence only, no gold leakage."""
    verdicts = []
    for claim in claims:
        ev = build_evidence_set(claim, rankings.get(claim.claim_id, []),
                                corpus.documents, model_cfg.max_sentences,
                                training=False)
        label, probs = predict_label(ev, params, model_cfg)
        verdicts.append(Verdict(
            claim_id=claim.claim_id,
            label=label,
            evidence=[(s.doc_id, s.sent_idx) for s in ev.sentences],
            probabilities=(float(probs[0]), float(probs[1]), float(probs[2])),
        ))
    return verdicts


# -- end-to-end pipeline --------------------------------------------------


@dataclass
class PipelineResult:
    vocab: Vocabulary
    selector: SelectorParams | None
    verifier: VerifierParams
    rankings: dict[int, list[RankedSentence]]
    verdicts: list[Verdict]
    report: EvalReport
    selector_record: RunRecord | None
    verifier_record: RunRecord
    train_claims: list[Claim]
    held_claims: list[Claim]
    wall_seconds: float


def run_pipeline(corpus: Corpus, model_cfg: ModelConfig, cfg: TrainConfig,
                 vocab: Vocabulary | None = None,
                 rankings: dict[int, list[RankedSentence]] | None = None,
                 ) -> PipelineResult:
    """Split, train the selector (unless rankings are supplied), rank, train
    the verifier, then score the held-out claims."""
    t0 = time.perf_counter()
    validate_corpus(corpus)
    train, held = split_claims(corpus.claims, cfg.holdout_fraction, cfg.seed)
    if not held:
        raise ContractError("holdout_fraction left no claims to evaluate")
    if vocab is None:
        vocab = build_vocabulary(corpus, train)
    selector = None
    selector_record = None
    if rankings is None:
        selector, selector_record = train_selector(corpus, train, vocab, model_cfg, cfg)
        rankings = rank_all(corpus, selector, model_cfg.max_sentences)
    verifier, verifier_record = train_verifier(corpus, train, rankings, vocab,
                                               model_cfg, cfg)
    verdicts = predict_claims(corpus, held, rankings, verifier, model_cfg)
    report = build_report(held, verdicts, m=model_cfg.max_sentences)
    verifier_record.report = report.to_dict()
    verifier_record.metrics.update({
        "label_accuracy": report.label_accuracy,
        "strict_score": report.strict_score,
        "precision": report.precision,
        "recall_at_m": report.recall_at_m,
        "f1": report.f1,
    })
    return PipelineResult(
        vocab=vocab,
        selector=selector,
        verifier=verifier,
        rankings=rankings,
        verdicts=verdicts,
        report=report,
        selector_record=selector_record,
        verifier_record=verifier_record,
        train_claims=train,
        held_claims=held,
        wall_seconds=time.perf_counter() - t0,
    )


# -- ablation grid --------------------------------------------------------

ABLATION_CELLS = (
    "full",
    "no_token_attn",
    "no_sent_attn",
    "no_class_weights",
    "no_joint",
    "gate_key",
    "gate_key_value",
    "gate_dot_product",
    "gate_none",
)


def _apply_cell(name: str, model_cfg: ModelConfig,
                cfg: TrainConfig) -> tuple[ModelConfig, TrainConfig]:
    from .attention import GateStrategy

    if name == "full":
        return model_cfg, cfg
    if name == "no_token_attn":
        return replace(model_cfg, use_token_attn=False), cfg
    if name == "no_sent_attn":
        return replace(model_cfg, use_sent_attn=False), cfg
    if name == "no_class_weights":
        return model_cfg, replace(cfg, use_class_weights=False)
    if name == "no_joint":
        return model_cfg, replace(cfg, joint=False)
    gates = {
        "gate_key": GateStrategy.KEY_ONLY,
        "gate_key_value": GateStrategy.KEY_AND_VALUE,
        "gate_dot_product": GateStrategy.DOT_PRODUCT_BIAS,
        "gate_none": GateStrategy.NO_GATE,
    }
    if name in gates:
        return replace(model_cfg, gate_strategy=gates[name]), cfg
    raise ContractError(f"unknown ablation cell {name!r}")


def run_ablation(corpus: Corpus, model_cfg: ModelConfig,
                 cfg: TrainConfig) -> list[RunRecord]:
    """One selector, nine verifier cells: component toggles and gate
    strategies, each scored on the shared held-out split."""
    validate_corpus(corpus)
    train, held = split_claims(corpus.claims, cfg.holdout_fraction, cfg.seed)
    if not held:
        raise ContractError("holdout_fraction left no claims to evaluate")
    vocab = build_vocabulary(corpus, train)
    selector, _ = train_selector(corpus, train, vocab, model_cfg, cfg)
    rankings = rank_all(corpus, selector, model_cfg.max_sentences)
    records: list[RunRecord] = []
    for name in ABLATION_CELLS:
        m_cfg, t_cfg = _apply_cell(name, model_cfg, cfg)
        verifier, record = train_verifier(corpus, train, rankings, vocab, m_cfg, t_cfg)
        verdicts = predict_claims(corpus, held, rankings, verifier, m_cfg)
        report = build_report(held, verdicts, m=m_cfg.max_sentences)
        record.cell = name
        record.report = report.to_dict()
        record.metrics.update({
            "label_accuracy": report.label_accuracy,
            "strict_score": report.strict_score,
        })
        records.append(record)
        log.info("ablation %s: la %.3f strict %.3f",
                 name, report.label_accuracy, report.strict_score)
    return records
