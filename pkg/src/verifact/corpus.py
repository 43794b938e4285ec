"""Corpus data model, line-delimited JSON I/O and a synthetic generator.

Three files describe a corpus: documents (id + sentence list), claims (text,
optional label, evidence groups of [doc_id, sent_idx] pairs) and retrievals
(ranked candidate documents per claim). Labels on disk use the long strings
SUPPORTS / REFUTES / NOT ENOUGH INFO; in memory they are S / R / N.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LABELS = ("S", "R", "N")
LABEL_TO_WIRE = {"S": "SUPPORTS", "R": "REFUTES", "N": "NOT ENOUGH INFO"}
WIRE_TO_LABEL = {w: s for s, w in LABEL_TO_WIRE.items()} | {s: s for s in LABELS}

DOCUMENTS_FILE = "documents.jsonl"
CLAIMS_FILE = "claims.jsonl"
RETRIEVALS_FILE = "retrievals.jsonl"


class CorpusValidationError(ValueError):
    pass


def label_from_wire(raw: str) -> str:
    if raw not in WIRE_TO_LABEL:
        raise CorpusValidationError(f"unknown label {raw!r}")
    return WIRE_TO_LABEL[raw]


@dataclass
class Document:
    doc_id: str
    sentences: list[str]

    @property
    def title(self) -> str:
        return self.doc_id.replace("_", " ")


@dataclass
class Claim:
    claim_id: int
    text: str
    label: str | None
    evidence_groups: list[list[tuple[str, int]]] = field(default_factory=list)

    def evidence_pairs(self) -> set[tuple[str, int]]:
        """Union of all groups."""
        return {pair for group in self.evidence_groups for pair in group}

    def gold_doc_ids(self) -> list[str]:
        return sorted({doc_id for group in self.evidence_groups for doc_id, _ in group})


@dataclass
class Corpus:
    documents: dict[str, Document]
    claims: list[Claim]
    retrievals: dict[int, list[str]]

    def claim_by_id(self, claim_id: int) -> Claim:
        for c in self.claims:
            if c.claim_id == claim_id:
                return c
        raise KeyError(claim_id)


def title_prefixed(doc: Document, sent_idx: int) -> str:
    """Candidate sentence text as the models see it: title, colon, sentence."""
    return f"{doc.title} : {doc.sentences[sent_idx]}"


# -- validation ---------------------------------------------------------


def validate_corpus(corpus: Corpus) -> None:
    problems: list[str] = []
    seen_ids: set[int] = set()
    for claim in corpus.claims:
        if claim.claim_id in seen_ids:
            problems.append(f"claim {claim.claim_id}: duplicate id")
        seen_ids.add(claim.claim_id)
        if claim.label is not None and claim.label not in LABELS:
            problems.append(f"claim {claim.claim_id}: bad label {claim.label!r}")
        if claim.label == "N" and claim.evidence_groups:
            problems.append(f"claim {claim.claim_id}: NOT ENOUGH INFO with evidence")
        for group in claim.evidence_groups:
            if not group:
                problems.append(f"claim {claim.claim_id}: empty evidence group")
            for doc_id, sent_idx in group:
                doc = corpus.documents.get(doc_id)
                if doc is None:
                    problems.append(f"claim {claim.claim_id}: evidence doc {doc_id!r} missing")
                elif not 0 <= sent_idx < len(doc.sentences):
                    problems.append(
                        f"claim {claim.claim_id}: sentence {sent_idx} out of range for {doc_id!r}"
                    )
    for claim_id, doc_ids in corpus.retrievals.items():
        if claim_id not in seen_ids:
            problems.append(f"retrieval for unknown claim {claim_id}")
        for doc_id in doc_ids:
            if doc_id not in corpus.documents:
                problems.append(f"retrieval for claim {claim_id}: doc {doc_id!r} missing")
    if problems:
        shown = "; ".join(problems[:20])
        more = f" (+{len(problems) - 20} more)" if len(problems) > 20 else ""
        raise CorpusValidationError(shown + more)


# -- line-delimited json ------------------------------------------------


def _read_jsonl(path: Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise CorpusValidationError(f"{path}:{lineno}: bad JSON ({err.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusValidationError(f"{path}:{lineno}: expected an object")
            records.append(obj)
    return records


def _require(obj: dict, key: str, path: Path, lineno: int):
    if key not in obj:
        raise CorpusValidationError(f"{path}:{lineno}: missing key {key!r}")
    return obj[key]


def load_documents(path) -> dict[str, Document]:
    path = Path(path)
    docs: dict[str, Document] = {}
    for i, obj in enumerate(_read_jsonl(path), start=1):
        doc_id = _require(obj, "doc_id", path, i)
        sentences = _require(obj, "sentences", path, i)
        if not isinstance(sentences, list) or not all(isinstance(s, str) for s in sentences):
            raise CorpusValidationError(f"{path}:{i}: sentences must be a list of strings")
        if doc_id in docs:
            raise CorpusValidationError(f"{path}:{i}: duplicate doc_id {doc_id!r}")
        docs[doc_id] = Document(doc_id=doc_id, sentences=sentences)
    return docs


def load_claims(path) -> list[Claim]:
    path = Path(path)
    claims = []
    for i, obj in enumerate(_read_jsonl(path), start=1):
        claim_id = _require(obj, "id", path, i)
        text = _require(obj, "claim", path, i)
        raw_label = obj.get("label")
        try:
            label = None if raw_label is None else label_from_wire(raw_label)
        except CorpusValidationError as err:
            raise CorpusValidationError(f"{path}:{i}: {err}") from None
        groups = []
        for group in obj.get("evidence", []):
            try:
                groups.append([(str(d), int(s)) for d, s in group])
            except (TypeError, ValueError):
                raise CorpusValidationError(
                    f"{path}:{i}: evidence must be groups of [doc_id, sent_idx] pairs"
                ) from None
        claims.append(Claim(claim_id=claim_id, text=text, label=label, evidence_groups=groups))
    return claims


def load_retrievals(path) -> dict[int, list[str]]:
    path = Path(path)
    out: dict[int, list[str]] = {}
    for i, obj in enumerate(_read_jsonl(path), start=1):
        claim_id = _require(obj, "id", path, i)
        pages = _require(obj, "predicted_pages", path, i)
        if claim_id in out:
            raise CorpusValidationError(f"{path}:{i}: duplicate retrieval for claim {claim_id}")
        out[claim_id] = [str(p) for p in pages]
    return out


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    corpus = Corpus(
        documents=load_documents(directory / DOCUMENTS_FILE),
        claims=load_claims(directory / CLAIMS_FILE),
        retrievals=load_retrievals(directory / RETRIEVALS_FILE),
    )
    validate_corpus(corpus)
    return corpus


def save_corpus(corpus: Corpus, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / DOCUMENTS_FILE, "w", encoding="utf-8") as fh:
        for doc in corpus.documents.values():
            fh.write(json.dumps({"doc_id": doc.doc_id, "sentences": doc.sentences}) + "\n")
    with open(directory / CLAIMS_FILE, "w", encoding="utf-8") as fh:
        for claim in corpus.claims:
            obj = {
                "id": claim.claim_id,
                "claim": claim.text,
                "label": None if claim.label is None else LABEL_TO_WIRE[claim.label],
                "evidence": [[[d, s] for d, s in group] for group in claim.evidence_groups],
            }
            fh.write(json.dumps(obj) + "\n")
    with open(directory / RETRIEVALS_FILE, "w", encoding="utf-8") as fh:
        for claim in corpus.claims:
            pages = corpus.retrievals.get(claim.claim_id, [])
            fh.write(json.dumps({"id": claim.claim_id, "predicted_pages": pages}) + "\n")


# -- statistics ---------------------------------------------------------


@dataclass
class CorpusStats:
    n_claims: int
    n_documents: int
    label_counts: dict[str, int]
    group_sizes: dict[int, int]


def corpus_stats(corpus: Corpus) -> CorpusStats:
    labels = Counter(c.label for c in corpus.claims if c.label is not None)
    sizes = Counter(len(g) for c in corpus.claims for g in c.evidence_groups)
    return CorpusStats(
        n_claims=len(corpus.claims),
        n_documents=len(corpus.documents),
        label_counts={lab: labels.get(lab, 0) for lab in LABELS},
        group_sizes=dict(sorted(sizes.items())),
    )


# -- synthetic world ----------------------------------------------------

# The verifiable attribute types below each map to one document sentence.
# The last two pools appear only in claims, never in documents, so claims
# built from them cannot be decided by any evidence.
FIRST_NAMES = ["mira", "tomas", "edda", "rafi", "suki", "bruno", "lena", "otto",
               "nadia", "piotr", "anya", "jorge", "karin", "dev", "olga", "finn",
               "rosa", "emil", "tessa", "ivo"]
LAST_NAMES = ["dolen", "akiba", "verne", "solak", "brandt", "okafor", "lindt",
              "marek", "castell", "novik", "ferro", "quist", "abalos", "renn",
              "sato", "krug", "valdi", "moss", "pike", "arany"]
PROFESSIONS = ["falconer", "glassblower", "cartographer", "beekeeper", "locksmith",
               "astronomer", "weaver", "chandler", "cooper", "fletcher", "mason", "tanner"]
CITIES = ["porto", "talin", "quezon", "leiden", "matera", "bergen", "osaka",
          "cusco", "tartu", "medina", "varna", "ghent"]
INSTRUMENTS = ["violin", "cello", "oboe", "zither", "lute", "marimba", "bassoon",
               "dulcimer", "accordion", "mandolin"]
GUILDS = ["copper", "salt", "amber", "wool", "ivory", "cedar", "onyx", "saffron"]
VEHICLES = ["sloop", "zeppelin", "tricycle", "gondola", "snowcat", "rickshaw"]
LANGUAGES = ["basque", "quechua", "maltese", "frisian", "sami", "ladino"]

TABLE_RATIO_COUNTS = (80035, 29775, 35659)  # S, R, N reference distribution


@dataclass(frozen=True)
class SyntheticSpec:
    n_claims: int
    seed: int
    n_docs: int | None = None          # default: about one doc per 5 claims
    sents_per_doc: int = 5
    evidence_pattern: str = "mixed"    # single | double | mixed
    retrieved_per_claim: int = 3
    label_ratios: tuple[float, float, float] = tuple(
        c / sum(TABLE_RATIO_COUNTS) for c in TABLE_RATIO_COUNTS
    )

    def __post_init__(self):
        if self.n_claims < 1:
            raise CorpusValidationError("n_claims must be positive")
        if self.sents_per_doc < 3:
            raise CorpusValidationError("need at least 3 sentences per document")
        if self.evidence_pattern not in ("single", "double", "mixed"):
            raise CorpusValidationError(f"unknown evidence pattern {self.evidence_pattern!r}")
        if abs(sum(self.label_ratios) - 1.0) > 1e-9:
            raise CorpusValidationError("label ratios must sum to 1")


def apportion(n: int, ratios: tuple[float, ...]) -> list[int]:
    """Largest-remainder rounding; each count lands within 1 of ratio * n."""
    exact = [r * n for r in ratios]
    counts = [int(x) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: exact[i] - counts[i], reverse=True)
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _pick_other(rng: np.random.Generator, pool_size: int, avoid: int) -> int:
    """Uniform index over the pool excluding one entry."""
    k = int(rng.integers(0, pool_size - 1))
    return k + 1 if k >= avoid else k


_ATTRIBUTES = (
    ("profession", PROFESSIONS, "{name} is a {value}."),
    ("city", CITIES, "{name} was born in {value}."),
    ("instrument", INSTRUMENTS, "{name} plays the {value}."),
    ("guild", GUILDS, "{name} belongs to the {value} guild."),
)
_UNDECIDABLE = (
    (VEHICLES, "{name} owns a {value}."),
    (LANGUAGES, "{name} speaks {value}."),
)


def generate_synthetic(spec: SyntheticSpec) -> Corpus:
    """Entity/attribute world with decidable and undecidable claims.

    Every document describes one entity, one attribute per sentence. SUPPORTS
    claims restate attributes verbatim, REFUTES claims substitute a wrong
    value from the same pool, NOT ENOUGH INFO claims assert attribute types
    that no document mentions. Retrieval always includes the entity's own
    document plus distractors. All randomness is integer draws from one
    seeded generator, so regeneration is bitwise reproducible.
    """
    rng = np.random.default_rng(spec.seed)
    n_docs = spec.n_docs or max(2, -(-spec.n_claims // 5))

    names = [f"{f} {l}" for f in FIRST_NAMES for l in LAST_NAMES]
    if n_docs > len(names):
        names += [f"{names[i % len(names)]} {i // len(names) + 2}" for i in
                  range(len(names), n_docs)]
    name_order = rng.permutation(len(names))[:n_docs]

    documents: dict[str, Document] = {}
    doc_ids: list[str] = []
    doc_names: list[str] = []
    doc_attrs: list[dict[str, int]] = []
    for di in range(n_docs):
        name = names[int(name_order[di])]
        doc_id = "_".join(w.capitalize() for w in name.split())
        attrs = {key: int(rng.integers(0, len(pool))) for key, pool, _ in _ATTRIBUTES}
        sentences = [tpl.format(name=name, value=pool[attrs[key]])
                     for key, pool, tpl in _ATTRIBUTES]
        if n_docs > 1:
            mentor = names[int(name_order[_pick_other(rng, n_docs, di)])]
        else:
            mentor = "the registry"
        sentences.append(f"{name} trained with {mentor}.")
        for extra in range(len(sentences), spec.sents_per_doc):
            sentences.append(f"{name} appears in volume {extra - 3} of the registry.")
        sentences = sentences[: spec.sents_per_doc]
        documents[doc_id] = Document(doc_id=doc_id, sentences=sentences)
        doc_ids.append(doc_id)
        doc_names.append(name)
        doc_attrs.append(attrs)

    # claims may only cite attribute sentences that survived truncation
    usable_attrs = min(len(_ATTRIBUTES), spec.sents_per_doc)

    n_s, n_r, n_n = apportion(spec.n_claims, spec.label_ratios)
    labels = ["S"] * n_s + ["R"] * n_r + ["N"] * n_n
    labels = [labels[int(i)] for i in rng.permutation(len(labels))]

    def wants_double() -> bool:
        if spec.evidence_pattern == "single":
            return False
        if spec.evidence_pattern == "double":
            return True
        return int(rng.integers(0, 3)) == 0

    claims: list[Claim] = []
    retrievals: dict[int, list[str]] = {}
    for ci, label in enumerate(labels):
        di = int(rng.integers(0, n_docs))
        doc_id = doc_ids[di]
        name = doc_names[di]
        attrs = doc_attrs[di]
        if label == "N":
            pool, tpl = _UNDECIDABLE[int(rng.integers(0, len(_UNDECIDABLE)))]
            text = tpl.format(name=name, value=pool[int(rng.integers(0, len(pool)))])
            groups: list[list[tuple[str, int]]] = []
        elif wants_double():
            # claim about attributes 0 and 1, evidence needs both sentences
            prof_i, city_i = attrs["profession"], attrs["city"]
            if label == "R":
                if int(rng.integers(0, 2)) == 0:
                    prof_i = _pick_other(rng, len(PROFESSIONS), prof_i)
                else:
                    city_i = _pick_other(rng, len(CITIES), city_i)
            text = f"{name} is a {PROFESSIONS[prof_i]} and was born in {CITIES[city_i]}."
            groups = [[(doc_id, 0), (doc_id, 1)]]
        else:
            ai = int(rng.integers(0, usable_attrs))
            key, pool, tpl = _ATTRIBUTES[ai]
            value_i = attrs[key]
            if label == "R":
                value_i = _pick_other(rng, len(pool), value_i)
            text = tpl.format(name=name, value=pool[value_i])
            groups = [[(doc_id, ai)]]

        pages = {doc_id}
        while len(pages) < min(spec.retrieved_per_claim, n_docs):
            pages.add(doc_ids[int(rng.integers(0, n_docs))])
        ordered = sorted(pages)
        ordered = [ordered[int(i)] for i in rng.permutation(len(ordered))]
        claims.append(Claim(claim_id=ci, text=text, label=label, evidence_groups=groups))
        retrievals[ci] = ordered

    corpus = Corpus(documents=documents, claims=claims, retrievals=retrievals)
    validate_corpus(corpus)
    return corpus
