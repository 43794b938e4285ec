"""Command-line interface.

Subcommands cover the full workflow: generate a synthetic corpus, train and
apply the sentence selector, train the verifier (scoring its held-out split),
predict verdicts, score verdict files and run the ablation grid. A flat JSON
file passed with --config supplies any field of the model, training or
synthesis configs by name; unknown keys are rejected. --seed overrides the
configured seed. Exit codes: 0 success, 1 validation or usage error,
2 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .attention import GateStrategy
from .corpus import (
    CorpusValidationError,
    SyntheticSpec,
    corpus_stats,
    generate_synthetic,
    load_corpus,
    save_corpus,
)
from .encoder import Vocabulary
from .evaluation import EvaluationError, build_report, format_report, report_json
from .model import ModelConfig, VerifierParams, read_verdicts, write_verdicts
from .selection import SelectorParams, read_rankings, write_rankings
from .tensor import ContractError, load_into, save_tensors
from .training import (
    RunRecord,
    TrainConfig,
    TrainingDivergedError,
    build_vocabulary,
    config_snapshot,
    predict_claims,
    rank_all,
    run_ablation,
    split_claims,
    train_selector,
    train_verifier,
    write_run_record,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


_MODEL_FIELDS = set(ModelConfig.__dataclass_fields__)
_TRAIN_FIELDS = set(TrainConfig.__dataclass_fields__)
_SPEC_FIELDS = set(SyntheticSpec.__dataclass_fields__)


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(raw) - _MODEL_FIELDS - _TRAIN_FIELDS - _SPEC_FIELDS)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    return raw


def build_configs(raw: dict, seed: int | None) -> tuple[ModelConfig, TrainConfig]:
    model_kw = {k: raw[k] for k in raw if k in _MODEL_FIELDS}
    if "gate_strategy" in model_kw and not isinstance(model_kw["gate_strategy"], GateStrategy):
        try:
            model_kw["gate_strategy"] = GateStrategy(model_kw["gate_strategy"])
        except ValueError:
            raise ConfigError(
                f"unknown gate_strategy {model_kw['gate_strategy']!r}; choose from "
                f"{[g.value for g in GateStrategy]}") from None
    train_kw = {k: raw[k] for k in raw if k in _TRAIN_FIELDS}
    if seed is not None:
        train_kw["seed"] = seed
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def build_spec(raw: dict, n_claims: int | None, seed: int | None) -> SyntheticSpec:
    kw = {k: raw[k] for k in raw if k in _SPEC_FIELDS}
    if "label_ratios" in kw:
        kw["label_ratios"] = tuple(kw["label_ratios"])
    if n_claims is not None:
        kw["n_claims"] = n_claims
    if seed is not None:
        kw["seed"] = seed
    kw.setdefault("n_claims", 1000)
    kw.setdefault("seed", 0)
    return SyntheticSpec(**kw)


# -- model directory layout ------------------------------------------------

CONFIG_FILE = "config.json"
VOCAB_FILE = "vocab.txt"
SELECTOR_CKPT = "selector.ckpt"
VERIFIER_CKPT = "verifier.ckpt"


def _save_model_dir(out: Path, vocab: Vocabulary, model_cfg: ModelConfig,
                    train_cfg: TrainConfig, ckpt_name: str, params) -> None:
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / VOCAB_FILE)
    (out / CONFIG_FILE).write_text(
        json.dumps(config_snapshot(model_cfg, train_cfg), indent=2) + "\n",
        encoding="utf-8")
    save_tensors(out / ckpt_name, params.named())


def _load_model_dir(model_dir: Path) -> tuple[Vocabulary, ModelConfig, TrainConfig]:
    cfg_path = model_dir / CONFIG_FILE
    if not cfg_path.exists():
        raise ConfigError(f"{model_dir}: missing {CONFIG_FILE}")
    raw = json.loads(cfg_path.read_text(encoding="utf-8"))
    raw = {k: v for k, v in raw.items() if k in _MODEL_FIELDS | _TRAIN_FIELDS}
    model_cfg, train_cfg = build_configs(raw, seed=None)
    vocab = Vocabulary.load(model_dir / VOCAB_FILE)
    return vocab, model_cfg, train_cfg


def load_selector(model_dir) -> tuple[SelectorParams, ModelConfig]:
    model_dir = Path(model_dir)
    vocab, model_cfg, _ = _load_model_dir(model_dir)
    params = SelectorParams.create(model_cfg.encoder_config(len(vocab)), vocab,
                                   np.random.default_rng(0))
    load_into(model_dir / SELECTOR_CKPT, params.named())
    return params, model_cfg


def load_verifier(model_dir) -> tuple[VerifierParams, ModelConfig]:
    model_dir = Path(model_dir)
    vocab, model_cfg, _ = _load_model_dir(model_dir)
    params = VerifierParams.create(model_cfg, vocab, np.random.default_rng(0))
    load_into(model_dir / VERIFIER_CKPT, params.named())
    return params, model_cfg


# -- subcommands ------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    spec = build_spec(load_config(args.config), args.claims, args.seed)
    corpus = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out)
    stats = corpus_stats(corpus)
    print(f"wrote {stats.n_claims} claims over {stats.n_documents} documents "
          f"to {out} (labels {stats.label_counts})")
    return 0


def cmd_train_selector(args) -> int:
    corpus = load_corpus(args.corpus)
    model_cfg, train_cfg = build_configs(load_config(args.config), args.seed)
    train, _ = split_claims(corpus.claims, train_cfg.holdout_fraction, train_cfg.seed)
    vocab = build_vocabulary(corpus, train)
    params, record = train_selector(corpus, train, vocab, model_cfg, train_cfg)
    out = Path(args.out)
    _save_model_dir(out, vocab, model_cfg, train_cfg, SELECTOR_CKPT, params)
    write_run_record(out / "selector_run.json", record)
    print(f"selector trained on {len(train)} claims; "
          f"final loss {record.epoch_losses[-1]:.4f}; saved to {out}")
    return 0


def cmd_select(args) -> int:
    corpus = load_corpus(args.corpus)
    params, model_cfg = load_selector(args.model)
    m = args.m if args.m is not None else model_cfg.max_sentences
    rankings = rank_all(corpus, params, m)
    write_rankings(args.out, rankings)
    print(f"ranked top-{m} sentences for {len(rankings)} claims -> {args.out}")
    return 0


def cmd_train_verifier(args) -> int:
    corpus = load_corpus(args.corpus)
    rankings = read_rankings(args.rankings)
    model_cfg, train_cfg = build_configs(load_config(args.config), args.seed)
    train, held = split_claims(corpus.claims, train_cfg.holdout_fraction, train_cfg.seed)
    vocab = build_vocabulary(corpus, train)
    params, record = train_verifier(corpus, train, rankings, vocab, model_cfg, train_cfg)
    if held:
        verdicts = predict_claims(corpus, held, rankings, params, model_cfg)
        report = build_report(held, verdicts, m=model_cfg.max_sentences)
        record.report = report.to_dict()
        record.metrics.update({
            "label_accuracy": report.label_accuracy,
            "strict_score": report.strict_score,
        })
        print(format_report(report))
    out = Path(args.out)
    _save_model_dir(out, vocab, model_cfg, train_cfg, VERIFIER_CKPT, params)
    write_run_record(out / "verifier_run.json", record)
    print(f"verifier trained on {len(train)} claims; saved to {out}")
    return 0


def cmd_predict(args) -> int:
    corpus = load_corpus(args.corpus)
    rankings = read_rankings(args.rankings)
    params, model_cfg = load_verifier(args.model)
    verdicts = predict_claims(corpus, corpus.claims, rankings, params, model_cfg)
    write_verdicts(args.out, verdicts)
    print(f"wrote {len(verdicts)} verdicts -> {args.out}")
    return 0


def cmd_score(args) -> int:
    corpus = load_corpus(args.corpus)
    verdicts = read_verdicts(args.verdicts)
    report = build_report(corpus.claims, verdicts, m=args.m)
    print(format_report(report))
    if args.out:
        Path(args.out).write_text(report_json(report) + "\n", encoding="utf-8")
    return 0


def cmd_ablate(args) -> int:
    corpus = load_corpus(args.corpus)
    model_cfg, train_cfg = build_configs(load_config(args.config), args.seed)
    records = run_ablation(corpus, model_cfg, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = [json.loads(r.to_json()) for r in records]
    (out / "ablation.json").write_text(json.dumps(grid, indent=2) + "\n",
                                       encoding="utf-8")
    width = max(len(r.cell or "") for r in records)
    print(f"{'cell':<{width}}  label_acc  strict")
    for r in records:
        print(f"{r.cell:<{width}}  {r.metrics['label_accuracy']:>9.4f}  "
              f"{r.metrics['strict_score']:>6.4f}")
    print(f"grid written to {out / 'ablation.json'}")
    return 0


# -- parser ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Exit 1 on usage errors; 2 stays reserved for divergence."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="verifact",
                     description="Desk-scale fact verification pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, seed=True):
        if config:
            p.add_argument("--config", help="flat JSON config file")
        if seed:
            p.add_argument("--seed", type=int, help="override the configured seed")

    p = sub.add_parser("gen-synthetic", parents=[], help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="corpus directory to write")
    p.add_argument("--claims", type=int, help="number of claims")
    common(p)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train-selector", help="train the evidence selector")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="model directory to write")
    common(p)
    p.set_defaults(func=cmd_train_selector)

    p = sub.add_parser("select", help="rank candidate sentences per claim")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True, help="trained selector directory")
    p.add_argument("--out", required=True, help="rankings JSONL to write")
    p.add_argument("--m", type=int, help="sentences to keep per claim")
    common(p, config=False, seed=False)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train-verifier", help="train the veracity model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--rankings", required=True, help="rankings JSONL from select")
    p.add_argument("--out", required=True, help="model directory to write")
    common(p)
    p.set_defaults(func=cmd_train_verifier)

    p = sub.add_parser("predict", help="write verdicts for every claim")
    p.add_argument("--corpus", required=True)
    p.add_argument("--rankings", required=True)
    p.add_argument("--model", required=True, help="trained verifier directory")
    p.add_argument("--out", required=True, help="verdicts JSONL to write")
    common(p, config=False, seed=False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("score", help="score a verdicts file against gold labels")
    p.add_argument("--corpus", required=True)
    p.add_argument("--verdicts", required=True)
    p.add_argument("--m", type=int, default=5, help="evidence cut-off")
    p.add_argument("--out", help="report JSON to write")
    common(p, config=False, seed=False)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("ablate", help="run the nine-cell ablation grid")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="directory for the grid record")
    common(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ContractError, CorpusValidationError, EvaluationError,
            FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TypeError as exc:
        # dataclass rejecting a config field value
        print(f"error: bad config value ({exc})", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
