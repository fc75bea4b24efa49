"""Corpus records, word-level vocabulary, leakage-safe splits, and the
synthetic clinical-style corpus generator used in place of private data."""

from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, SchemaError

PAD, UNK, MASK, BOS = 0, 1, 2, 3
_SPECIAL_TOKENS = ("<pad>", "<unk>", "<mask>", "<bos>")

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)
_CONTROL_RE = re.compile(r"[\x00-\x08\x0b-\x1f\x7f]")


@dataclass
class Document:
    """One text unit: the universal corpus record."""

    id: str
    patient_id: str
    text: str
    note_category: str
    task_labels: dict[str, str] = field(default_factory=dict)


def clean_text(text: str) -> str:
    """Minimal cleaning: drop control characters, collapse whitespace."""
    return " ".join(_CONTROL_RE.sub(" ", text).split())


def words(text: str) -> list[str]:
    """Lowercased tokens split at whitespace and punctuation."""
    return _WORD_RE.findall(clean_text(text).lower())


@dataclass
class Vocabulary:
    """Token ids dense in [0, size); ids 0-3 are PAD/UNK/MASK/BOS."""

    token_to_id: dict[str, int]
    id_to_token: list[str]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def special_ids(self) -> tuple[int, ...]:
        return (PAD, UNK, MASK, BOS)

    def encode_word(self, word: str) -> int:
        return self.token_to_id.get(word, UNK)

    def to_json(self) -> dict:
        return {"tokens": self.id_to_token[len(_SPECIAL_TOKENS):]}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return _assemble_vocab(obj["tokens"])


def _assemble_vocab(tokens: list[str]) -> Vocabulary:
    id_to_token = list(_SPECIAL_TOKENS) + list(tokens)
    return Vocabulary({t: i for i, t in enumerate(id_to_token)}, id_to_token)


def build_vocab(corpus: list[Document], max_size: int) -> Vocabulary:
    """Keep the ``max_size - 4`` most frequent words; ties break lexicographically."""
    if not corpus:
        raise InputError("cannot build a vocabulary from an empty corpus")
    if max_size <= len(_SPECIAL_TOKENS):
        raise InputError(f"max_size must exceed {len(_SPECIAL_TOKENS)}")
    counts: dict[str, int] = {}
    for doc in corpus:
        for w in words(doc.text):
            counts[w] = counts.get(w, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [w for w, _ in ranked[: max_size - len(_SPECIAL_TOKENS)]]
    return _assemble_vocab(kept)


def tokenize(doc: Document, vocab: Vocabulary, max_len: int | None = 512) -> list[int]:
    """BOS-prefixed token ids, truncated to ``max_len`` (None = no truncation)."""
    ids = [BOS] + [vocab.encode_word(w) for w in words(doc.text)]
    if max_len is not None:
        ids = ids[:max_len]
    return ids


def content_token_count(doc: Document, vocab: Vocabulary) -> int:
    """Number of word tokens (no BOS, no truncation); the span-sampling length."""
    return len(words(doc.text))


# -- splits --------------------------------------------------------------------


@dataclass
class SplitManifest:
    """Patient-disjoint document-id partition for pretraining and evaluation."""

    pretrain_ids: list[str]
    train_ids: list[str]
    eval_ids: list[str]
    seed: int

    def validate(self, corpus: list[Document]) -> None:
        by_id = {d.id: d for d in corpus}
        pre, tr, ev = set(self.pretrain_ids), set(self.train_ids), set(self.eval_ids)
        if pre & (tr | ev):
            raise InputError("pretrain ids overlap downstream ids")
        if tr & ev:
            raise InputError("downstream train/eval ids overlap")
        tr_pat = {by_id[i].patient_id for i in tr}
        ev_pat = {by_id[i].patient_id for i in ev}
        if tr_pat & ev_pat:
            raise InputError("downstream train/eval share patients")

    def to_json(self) -> dict:
        return {
            "pretrain_ids": self.pretrain_ids,
            "train_ids": self.train_ids,
            "eval_ids": self.eval_ids,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SplitManifest":
        return cls(obj["pretrain_ids"], obj["train_ids"], obj["eval_ids"], obj["seed"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "SplitManifest":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


def make_splits(
    corpus: list[Document],
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> SplitManifest:
    """Allocate whole patient groups to pretrain/train/eval splits.

    Group order is shuffled by ``seed``; each split closes once its document
    count reaches its target, so sizes land within one group of the request.
    """
    if abs(sum(fractions) - 1.0) > 1e-6:
        raise InputError(f"fractions must sum to 1, got {fractions}")
    if any(f <= 0 for f in fractions):
        raise InputError("all split fractions must be positive")
    groups: dict[str, list[str]] = {}
    for doc in corpus:
        groups.setdefault(doc.patient_id, []).append(doc.id)
    if len(groups) < len(fractions):
        raise InputError(
            f"need at least {len(fractions)} patients for {len(fractions)} splits, "
            f"got {len(groups)}"
        )
    order = sorted(groups)
    rng = np.random.default_rng(seed)
    rng.shuffle(order)
    total = len(corpus)
    k = len(fractions)
    buckets: list[list[str]] = [[] for _ in range(k)]
    gi = 0
    for si in range(k):
        reserved = k - si - 1
        if si == k - 1:
            for pid in order[gi:]:
                buckets[si].extend(groups[pid])
            break
        target = fractions[si] * total
        count = 0
        while gi < len(order) - reserved and (count == 0 or count < target):
            pid = order[gi]
            buckets[si].extend(groups[pid])
            count += len(groups[pid])
            gi += 1
    manifest = SplitManifest(buckets[0], buckets[1], buckets[2], seed)
    manifest.validate(corpus)
    return manifest


# -- synthetic corpus ------------------------------------------------------------

_CATEGORY_NAMES = [
    "nursing",
    "physician",
    "social work",
    "occupational therapy",
    "care coordination",
    "psychology",
    "pharmacy",
    "physiotherapy",
    "dietetics",
    "speech therapy",
]

_TRIAGE_NAMES = [
    "cardiology",
    "neurology",
    "gastroenterology",
    "respiratory",
    "oncology",
    "obstetrics",
    "acute medicine",
]

# Note-category/triage label coupling strength.
_TRIAGE_COUPLING = 0.5

TOKEN_LABEL_BACKGROUND = "O"
TOKEN_LABEL_CATEGORY = "CAT"
TOKEN_LABEL_TRIAGE = "TRI"


@dataclass
class SynthConfig:
    """Knobs for the synthetic corpus; kappa=0 removes all class signal."""

    n_docs: int = 1000
    n_categories: int = 8
    n_triage: int = 4
    background_words: int = 1500
    signature_words: int = 30
    kappa: float = 1.0
    length_median: float = 40.0
    length_sigma: float = 0.5
    # Of the signature draws, this fraction comes from the triage signature
    # instead of the note-category signature (dilutes the category signal).
    triage_token_share: float = 0.5
    n_patients: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_docs < 1:
            raise InputError("n_docs must be >= 1")
        if not 0.0 <= self.kappa <= 1.0:
            raise InputError("kappa must lie in [0, 1]")
        if not 0.0 <= self.triage_token_share < 1.0:
            raise InputError("triage_token_share must lie in [0, 1)")
        if self.n_categories < 2 or self.n_triage < 2:
            raise InputError("need at least 2 categories and 2 triage classes")
        if self.n_patients is None:
            self.n_patients = max(self.n_docs // 4, 3)


def _name(i: int, kind: str) -> str:
    if kind == "category":
        if i < len(_CATEGORY_NAMES):
            return _CATEGORY_NAMES[i]
        return f"category {i}"
    if i < len(_TRIAGE_NAMES):
        return _TRIAGE_NAMES[i]
    return f"team {i}"


def generate_corpus(cfg: SynthConfig) -> list[Document]:
    """Sample documents whose tokens mix a background distribution with
    note-category and triage signature vocabularies at strength kappa."""
    rng = np.random.default_rng(cfg.seed)
    background = [f"w{i:04d}" for i in range(cfg.background_words)]
    cat_sigs = [
        [f"c{c:02d}s{j:03d}" for j in range(cfg.signature_words)]
        for c in range(cfg.n_categories)
    ]
    tri_sigs = [
        [f"t{t:02d}s{j:03d}" for j in range(cfg.signature_words)]
        for t in range(cfg.n_triage)
    ]
    mu = math.log(cfg.length_median)
    docs: list[Document] = []
    for i in range(cfg.n_docs):
        category = int(rng.integers(cfg.n_categories))
        if rng.random() < _TRIAGE_COUPLING:
            triage = category % cfg.n_triage
        else:
            triage = int(rng.integers(cfg.n_triage))
        length = max(3, int(round(rng.lognormal(mu, cfg.length_sigma))))
        toks: list[str] = []
        labels: list[str] = []
        for _ in range(length):
            if rng.random() < cfg.kappa:
                if rng.random() < cfg.triage_token_share:
                    toks.append(tri_sigs[triage][int(rng.integers(cfg.signature_words))])
                    labels.append(TOKEN_LABEL_TRIAGE)
                else:
                    toks.append(cat_sigs[category][int(rng.integers(cfg.signature_words))])
                    labels.append(TOKEN_LABEL_CATEGORY)
            else:
                toks.append(background[int(rng.integers(cfg.background_words))])
                labels.append(TOKEN_LABEL_BACKGROUND)
        docs.append(
            Document(
                id=f"doc{i:06d}",
                patient_id=f"p{int(rng.integers(cfg.n_patients)):05d}",
                text=" ".join(toks),
                note_category=_name(category, "category"),
                task_labels={
                    "category": _name(category, "category"),
                    "triage": _name(triage, "triage"),
                    "spantype": " ".join(labels),
                },
            )
        )
    return docs


# -- persistence -----------------------------------------------------------------

_REQUIRED_FIELDS = ("id", "patient_id", "text", "note_category")


def save_jsonl(corpus: list[Document], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc in corpus:
            rec = {
                "id": doc.id,
                "patient_id": doc.patient_id,
                "text": doc.text,
                "note_category": doc.note_category,
                "labels": doc.task_labels,
            }
            f.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def load_jsonl(path) -> list[Document]:
    docs: list[Document] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}: malformed JSON on line {lineno}: {e}") from e
            for fname in _REQUIRED_FIELDS:
                if fname not in rec:
                    raise SchemaError(f"{path}: line {lineno} missing field {fname!r}")
            docs.append(
                Document(
                    id=rec["id"],
                    patient_id=rec["patient_id"],
                    text=rec["text"],
                    note_category=rec["note_category"],
                    task_labels=dict(rec.get("labels", {})),
                )
            )
    if not docs:
        warnings.warn(f"{path}: empty corpus", stacklevel=2)
    return docs
