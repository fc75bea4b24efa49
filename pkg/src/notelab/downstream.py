"""Fine-tuning protocols (frozen, partially frozen, full), few-shot subsampling,
token classification, and the evaluation metrics reported for every run."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .corpus import Document, Vocabulary, tokenize, words
from .encoder import (
    EncoderConfig,
    FreezeSpec,
    apply_freeze,
    encode,
    pad_batch,
    pool,
)
from .errors import ContractError, InputError, TrainingError
from .heads import (
    apply_affine_head,
    apply_mlp_head,
    init_affine_head,
    init_mlp_head,
)
from .nn import (
    AdamW,
    Tensor,
    backward,
    log_softmax,
    mean,
    mul,
    softmax,
    sum_,
    take_along_last,
)


@dataclass
class TaskSpec:
    """A classification task read from a Document label field."""

    name: str
    labels: list[str]
    kind: str = "sequence"  # sequence | token
    label_field: str | None = None

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ContractError("a task needs at least 2 classes")
        if self.kind not in ("sequence", "token"):
            raise ContractError(f"unknown task kind {self.kind!r}")
        if self.label_field is None:
            self.label_field = self.name

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def label_index(self, value: str) -> int:
        try:
            return self.labels.index(value)
        except ValueError:
            raise ContractError(f"label {value!r} not in task {self.name!r}") from None

    @classmethod
    def from_docs(cls, docs: list[Document], field_name: str, kind: str = "sequence") -> "TaskSpec":
        if kind == "token":
            values = sorted({lab for d in docs for lab in d.task_labels[field_name].split()})
        else:
            values = sorted({d.task_labels[field_name] for d in docs})
        return cls(name=field_name, labels=values, kind=kind)


@dataclass
class FinetuneConfig:
    freeze: FreezeSpec = field(default_factory=FreezeSpec.all)
    epochs: int = 5
    batch_size: int = 16
    lr: float | None = None  # default depends on freeze: 1e-4 head-only, 1e-5 full
    weight_decay: float = 0.01
    samples_per_class: int | None = None  # None = use everything
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_class is not None and self.samples_per_class < 1:
            raise ContractError("samples_per_class must be >= 1 when set")
        if self.lr is None:
            self.lr = 1e-4 if (self.freeze.is_all) else 1e-5


@dataclass
class MetricsReport:
    accuracy: float
    f1_macro: float
    auc_macro: float
    precision_macro: float
    recall_macro: float
    per_class: dict[str, dict[str, float]]
    epoch: int = 0

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1_macro": self.f1_macro,
            "auc_macro": self.auc_macro,
            "precision_macro": self.precision_macro,
            "recall_macro": self.recall_macro,
            "per_class": self.per_class,
            "epoch": self.epoch,
        }


# -- sampling -----------------------------------------------------------------------


def few_shot_sample(
    docs: list[Document], label_field: str, k: int, seed: int = 0
) -> list[Document]:
    """Uniformly draw up to k documents per class, without replacement."""
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[int]] = {}
    for i, d in enumerate(docs):
        by_class.setdefault(d.task_labels[label_field], []).append(i)
    chosen: list[int] = []
    for label in sorted(by_class):
        idxs = by_class[label]
        if len(idxs) < k:
            warnings.warn(
                f"class {label!r} has only {len(idxs)} examples (< k={k}); using all",
                stacklevel=2,
            )
            chosen.extend(idxs)
        else:
            chosen.extend(rng.choice(idxs, size=k, replace=False))
    chosen.sort()
    return [docs[i] for i in chosen]


# -- metrics -------------------------------------------------------------------------


def _binary_auc(y: np.ndarray, scores: np.ndarray) -> float:
    """One-vs-rest AUC: trapezoidal ROC with tied scores grouped (midpoint ranks)."""
    order = np.argsort(-scores, kind="stable")
    y = y[order]
    s = scores[order]
    # group boundaries where the score changes
    distinct = np.where(np.diff(s))[0]
    cut = np.concatenate([distinct, [y.size - 1]])
    tps = np.cumsum(y)[cut]
    fps = np.cumsum(1 - y)[cut]
    tps = np.concatenate([[0], tps])
    fps = np.concatenate([[0], fps])
    P = tps[-1]
    N = fps[-1]
    if P == 0 or N == 0:
        return math.nan
    return float(np.trapezoid(tps / P, fps / N))


def compute_metrics(
    true_labels: np.ndarray,
    scores: np.ndarray,
    class_names: list[str] | None = None,
    epoch: int = 0,
) -> MetricsReport:
    """Accuracy plus macro precision/recall/F1 and one-vs-rest macro AUC.

    Per-class values with empty denominators are 0; classes absent from both
    the truth and the predictions are dropped from macro averages with a
    warning, as is AUC for any class without both positives and negatives.
    """
    true_labels = np.asarray(true_labels)
    scores = np.asarray(scores, dtype=np.float64)
    n, c = scores.shape
    if true_labels.shape != (n,):
        raise ContractError(f"labels shape {true_labels.shape} != ({n},)")
    rows = scores.sum(axis=1)
    if np.abs(rows - 1.0).max() > 1e-5:
        raise ContractError("score rows must sum to 1")
    pred = scores.argmax(axis=1)
    names = class_names if class_names is not None else [str(i) for i in range(c)]

    accuracy = float((pred == true_labels).mean())
    per_class: dict[str, dict[str, float]] = {}
    precs, recs, f1s, aucs = [], [], [], []
    for j in range(c):
        tp = int(((pred == j) & (true_labels == j)).sum())
        fp = int(((pred == j) & (true_labels != j)).sum())
        fn = int(((pred != j) & (true_labels == j)).sum())
        if tp + fp + fn == 0:
            warnings.warn(
                f"class {names[j]!r} absent from truth and predictions; "
                "excluded from macro averages",
                stacklevel=2,
            )
            continue
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        auc = _binary_auc((true_labels == j).astype(np.int64), scores[:, j])
        entry = {"precision": prec, "recall": rec, "f1": f1, "support": float((true_labels == j).sum())}
        if not math.isnan(auc):
            entry["auc"] = auc
            aucs.append(auc)
        else:
            warnings.warn(
                f"AUC undefined for class {names[j]!r} (needs both positives and negatives)",
                stacklevel=2,
            )
        per_class[names[j]] = entry
        precs.append(prec)
        recs.append(rec)
        f1s.append(f1)
    if not f1s:
        raise ContractError("no class present in truth or predictions")
    return MetricsReport(
        accuracy=accuracy,
        f1_macro=float(np.mean(f1s)),
        auc_macro=float(np.mean(aucs)) if aucs else math.nan,
        precision_macro=float(np.mean(precs)),
        recall_macro=float(np.mean(recs)),
        per_class=per_class,
        epoch=epoch,
    )


def micro_f1(true_labels: np.ndarray, pred_labels: np.ndarray) -> float:
    """Micro-averaged F1 over all classes (single-label: equals accuracy)."""
    true_labels = np.asarray(true_labels)
    pred_labels = np.asarray(pred_labels)
    if true_labels.shape != pred_labels.shape:
        raise ContractError("label arrays must have matching shapes")
    classes = np.unique(np.concatenate([true_labels, pred_labels]))
    tp = sum(int(((pred_labels == c) & (true_labels == c)).sum()) for c in classes)
    fp = sum(int(((pred_labels == c) & (true_labels != c)).sum()) for c in classes)
    fn = sum(int(((pred_labels != c) & (true_labels == c)).sum()) for c in classes)
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


# -- fine-tuning ----------------------------------------------------------------------


@dataclass
class FinetuneResult:
    head: dict[str, Tensor]
    reports: list[MetricsReport]
    best_f1_macro: float
    best_epoch: int


def _doc_labels(docs: list[Document], task: TaskSpec) -> np.ndarray:
    missing = [d.id for d in docs if task.label_field not in d.task_labels]
    if missing:
        raise InputError(f"{len(missing)} documents missing label {task.label_field!r}, e.g. {missing[0]}")
    return np.array([task.label_index(d.task_labels[task.label_field]) for d in docs])


def _embed_all(params, enc_cfg, vocab, docs, batch_size=64) -> np.ndarray:
    out = []
    for i in range(0, len(docs), batch_size):
        seqs = [tokenize(d, vocab, enc_cfg.max_len) for d in docs[i : i + batch_size]]
        ids, mask = pad_batch(seqs)
        out.append(pool(encode(params, enc_cfg, ids, mask), mask).data)
    return np.concatenate(out, axis=0)


def finetune_sequence(
    params: dict[str, Tensor],
    enc_cfg: EncoderConfig,
    vocab: Vocabulary,
    train_docs: list[Document],
    eval_docs: list[Document],
    task: TaskSpec,
    cfg: FinetuneConfig,
) -> FinetuneResult:
    """Train the depth-2 head (and any unfrozen encoder suffix); evaluate per epoch.

    With the encoder fully frozen, embeddings are computed once and the head
    trains on cached features, which is mathematically identical and much
    faster.
    """
    if task.kind != "sequence":
        raise ContractError("finetune_sequence needs a sequence task")
    rng = np.random.default_rng(cfg.seed)
    if cfg.samples_per_class is not None:
        train_docs = few_shot_sample(train_docs, task.label_field, cfg.samples_per_class, cfg.seed)
    y_train = _doc_labels(train_docs, task)
    y_eval = _doc_labels(eval_docs, task)
    trainable_enc = apply_freeze(params, cfg.freeze, enc_cfg.layers)
    frozen_all = not trainable_enc
    head = init_mlp_head(
        enc_cfg.d_model, enc_cfg.d_model, task.n_classes,
        np.random.default_rng(rng.integers(2**63)), "cls_head",
    )
    opt = AdamW({**trainable_enc, **head}, lr=cfg.lr, weight_decay=cfg.weight_decay)

    if frozen_all:
        feat_train = _embed_all(params, enc_cfg, vocab, train_docs)
        feat_eval = _embed_all(params, enc_cfg, vocab, eval_docs)
    else:
        seq_train = [tokenize(d, vocab, enc_cfg.max_len) for d in train_docs]

    reports: list[MetricsReport] = []
    for epoch in range(cfg.epochs):
        epoch_rng = np.random.default_rng(rng.integers(2**63))
        order = epoch_rng.permutation(len(train_docs))
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            if frozen_all:
                feats = Tensor(feat_train[idx])
                logits = apply_mlp_head(head, feats, "cls_head")
            else:
                ids, mask = pad_batch([seq_train[j] for j in idx])
                hidden = encode(params, enc_cfg, ids, mask)
                logits = apply_mlp_head(head, pool(hidden, mask), "cls_head")
            loss = mul(mean(take_along_last(log_softmax(logits), y_train[idx])), -1.0)
            if not np.isfinite(float(loss.data)):
                raise TrainingError(f"non-finite fine-tuning loss at epoch {epoch}")
            opt.zero_grad()
            backward(loss)
            opt.step()

        if frozen_all:
            eval_logits = apply_mlp_head(head, Tensor(feat_eval), "cls_head")
        else:
            eval_logits_np = []
            for i in range(0, len(eval_docs), 64):
                seqs = [tokenize(d, vocab, enc_cfg.max_len) for d in eval_docs[i : i + 64]]
                ids, mask = pad_batch(seqs)
                hidden = encode(params, enc_cfg, ids, mask)
                eval_logits_np.append(apply_mlp_head(head, pool(hidden, mask), "cls_head").data)
            eval_logits = Tensor(np.concatenate(eval_logits_np, axis=0))
        probs = softmax(eval_logits).data
        reports.append(compute_metrics(y_eval, probs, task.labels, epoch=epoch))

    best_epoch = int(np.argmax([r.f1_macro for r in reports]))
    return FinetuneResult(
        head=head,
        reports=reports,
        best_f1_macro=reports[best_epoch].f1_macro,
        best_epoch=best_epoch,
    )


def _token_label_ids(doc: Document, task: TaskSpec, max_len: int) -> list[int]:
    labels = doc.task_labels[task.label_field].split()
    toks = words(doc.text)
    if len(labels) != len(toks):
        raise ContractError(
            f"doc {doc.id}: {len(labels)} token labels for {len(toks)} tokens"
        )
    return [task.label_index(lab) for lab in labels[: max_len - 1]]


def finetune_token(
    params: dict[str, Tensor],
    enc_cfg: EncoderConfig,
    vocab: Vocabulary,
    train_docs: list[Document],
    eval_docs: list[Document],
    task: TaskSpec,
    cfg: FinetuneConfig,
) -> tuple[dict[str, Tensor], float]:
    """Per-token affine head; returns (head, micro-F1 on the eval split)."""
    if task.kind != "token":
        raise ContractError("finetune_token needs a token task")
    rng = np.random.default_rng(cfg.seed)
    apply_freeze(params, cfg.freeze, enc_cfg.layers)
    trainable_enc = {n: p for n, p in params.items() if p.requires_grad}
    head = init_affine_head(
        enc_cfg.d_model, task.n_classes, np.random.default_rng(rng.integers(2**63)), "tok_head"
    )
    opt = AdamW({**trainable_enc, **head}, lr=cfg.lr, weight_decay=cfg.weight_decay)

    def batch_arrays(docs):
        seqs = [tokenize(d, vocab, enc_cfg.max_len) for d in docs]
        ids, mask = pad_batch(seqs)
        lab = np.zeros_like(ids)
        weight = np.zeros(ids.shape, dtype=np.float64)
        for i, d in enumerate(docs):
            li = _token_label_ids(d, task, enc_cfg.max_len)
            lab[i, 1 : 1 + len(li)] = li  # position 0 is BOS: no label
            weight[i, 1 : 1 + len(li)] = 1.0
        return ids, mask, lab, weight

    for epoch in range(cfg.epochs):
        order = np.random.default_rng(rng.integers(2**63)).permutation(len(train_docs))
        for i in range(0, len(order), cfg.batch_size):
            docs = [train_docs[j] for j in order[i : i + cfg.batch_size]]
            ids, mask, lab, weight = batch_arrays(docs)
            hidden = encode(params, enc_cfg, ids, mask)
            logits = apply_affine_head(head, hidden, "tok_head")
            logp = take_along_last(log_softmax(logits), lab)
            total = weight.sum()
            loss = mul(sum_(mul(logp, weight.astype(logp.data.dtype))), -1.0 / max(total, 1.0))
            if not np.isfinite(float(loss.data)):
                raise TrainingError(f"non-finite token loss at epoch {epoch}")
            opt.zero_grad()
            backward(loss)
            opt.step()

    trues, preds = [], []
    for i in range(0, len(eval_docs), 64):
        docs = eval_docs[i : i + 64]
        ids, mask, lab, weight = batch_arrays(docs)
        hidden = encode(params, enc_cfg, ids, mask)
        logits = apply_affine_head(head, hidden, "tok_head").data
        pred = logits.argmax(axis=-1)
        keep = weight == 1.0
        trues.append(lab[keep])
        preds.append(pred[keep])
    score = micro_f1(np.concatenate(trues), np.concatenate(preds))
    return head, score
