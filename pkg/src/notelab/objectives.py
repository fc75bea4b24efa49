"""Pre-training objectives: masked-token prediction, adjacent-span contrastive
learning with a symmetric InfoNCE loss, a note-category classification signal,
and their weighted combination, plus the training loop that runs them."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import MASK, Document, Vocabulary, tokenize
from .encoder import EncoderConfig, encode, init_params, pad_batch, pool
from .errors import ConfigError, ContractError, SamplingError, ShapeError, TrainingError
from .heads import apply_mlp_head, init_mlp_head
from .nn import (
    AdamW,
    ScheduleConfig,
    Tensor,
    add,
    backward,
    div,
    log_softmax,
    lr_at,
    matmul,
    mean,
    mul,
    sum_,
    take_along_last,
    transpose,
)

MASK_FRACTION_MASK_TOKEN = 0.8
MASK_FRACTION_RANDOM = 0.1
TAU_FLOOR = 1e-3


# -- masked-token batches ----------------------------------------------------------


@dataclass
class MaskedBatch:
    """Corrupted inputs plus targets; weights mark exactly the corrupted slots."""

    input_ids: np.ndarray  # (B, T) after corruption
    target_ids: np.ndarray  # (B, T) original ids
    weights: np.ndarray  # (B, T) in {0, 1}
    vocab_size: int
    n_maskable: int


def mask_tokens(
    token_ids: np.ndarray,
    vocab: Vocabulary,
    mask_prob: float = 0.15,
    seed: int = 0,
) -> MaskedBatch:
    """Select non-special positions w.p. ``mask_prob``; 80/10/10 corruption."""
    if not 0.0 < mask_prob < 1.0:
        raise ContractError("mask_prob must lie in (0, 1)")
    token_ids = np.asarray(token_ids)
    rng = np.random.default_rng(seed)
    special = np.isin(token_ids, vocab.special_ids)
    eligible = ~special
    selected = eligible & (rng.random(token_ids.shape) < mask_prob)
    action = rng.random(token_ids.shape)
    random_ids = rng.integers(len(vocab.special_ids), vocab.size, size=token_ids.shape)

    corrupted = token_ids.copy()
    use_mask = selected & (action < MASK_FRACTION_MASK_TOKEN)
    use_random = selected & (action >= MASK_FRACTION_MASK_TOKEN) & (
        action < MASK_FRACTION_MASK_TOKEN + MASK_FRACTION_RANDOM
    )
    corrupted[use_mask] = MASK
    corrupted[use_random] = random_ids[use_random]
    return MaskedBatch(
        input_ids=corrupted,
        target_ids=token_ids.copy(),
        weights=selected.astype(np.float64),
        vocab_size=vocab.size,
        n_maskable=int(eligible.sum()),
    )


def mlm_loss(batch: MaskedBatch, lm_logits: Tensor) -> Tensor:
    """Mean cross-entropy over corrupted positions; 0 when nothing is masked."""
    if lm_logits.shape[:2] != batch.target_ids.shape:
        raise ShapeError(
            f"mlm_loss: logits {lm_logits.shape} do not cover ids {batch.target_ids.shape}"
        )
    total = batch.weights.sum()
    if total == 0:
        return Tensor(0.0)
    logp = take_along_last(log_softmax(lm_logits), batch.target_ids)
    picked = mul(logp, batch.weights.astype(lm_logits.data.dtype))
    return mul(sum_(picked), -1.0 / total)


# -- adjacent-span sampling --------------------------------------------------------


@dataclass
class SpanPairBatch:
    """Anchor/positive token spans grouped per source document."""

    anchors: list[list[int]]
    positives: list[list[int]]
    anchor_spans: list[tuple[int, int, int]]  # (doc index, start, end)
    positive_spans: list[tuple[int, int, int]]
    doc_indices: list[int]  # per pair
    anchors_per_doc: int
    span_min: int
    span_max: int

    @property
    def pair_count(self) -> int:
        return len(self.anchors)


def min_doc_length(anchors_per_doc: int, span_max: int) -> int:
    return 2 * anchors_per_doc * span_max


def sample_span_pairs(
    doc_tokens: list[list[int]],
    anchors_per_doc: int = 2,
    span_min: int = 16,
    span_max: int = 64,
    seed: int = 0,
) -> SpanPairBatch:
    """Draw anchor spans with adjacent positives from every eligible document.

    A document needs at least ``2 * anchors_per_doc * span_max`` tokens; each
    anchor/positive block is placed in its own stretch of the document so
    spans never overlap, and the positive sits immediately after or before
    its anchor with equal probability.
    """
    if anchors_per_doc < 1:
        raise ContractError("anchors_per_doc must be >= 1")
    if not 1 <= span_min <= span_max:
        raise ContractError("need 1 <= span_min <= span_max")
    threshold = min_doc_length(anchors_per_doc, span_max)
    rng = np.random.default_rng(seed)
    batch = SpanPairBatch([], [], [], [], [], anchors_per_doc, span_min, span_max)
    for di, toks in enumerate(doc_tokens):
        if len(toks) < threshold:
            continue
        segment = len(toks) // anchors_per_doc
        for a in range(anchors_per_doc):
            lo = a * segment
            len_a = int(rng.integers(span_min, span_max + 1))
            len_p = int(rng.integers(span_min, span_max + 1))
            block = len_a + len_p
            start = lo + int(rng.integers(0, segment - block + 1))
            if rng.random() < 0.5:
                a_start, p_start = start, start + len_a
            else:
                p_start, a_start = start, start + len_p
            batch.anchors.append(toks[a_start : a_start + len_a])
            batch.positives.append(toks[p_start : p_start + len_p])
            batch.anchor_spans.append((di, a_start, a_start + len_a))
            batch.positive_spans.append((di, p_start, p_start + len_p))
            batch.doc_indices.append(di)
    if not batch.anchors:
        raise SamplingError(
            f"no document reaches the span-sampling minimum of {threshold} tokens"
        )
    return batch


def eligibility_stats(lengths, thresholds) -> dict[int, float]:
    """Fraction of documents with at least ``m`` tokens, per threshold."""
    lengths = np.asarray(list(lengths))
    if lengths.size == 0:
        raise ContractError("eligibility_stats needs a non-empty corpus")
    return {int(m): float((lengths >= m).mean()) for m in thresholds}


# -- contrastive losses -------------------------------------------------------------


def infonce_loss(anchor_emb: Tensor, positive_emb: Tensor, tau) -> Tensor:
    """Symmetric in-batch InfoNCE on temperature-scaled dot products.

    Row softmax scores each anchor against every positive; the transposed
    direction scores each positive against every anchor; the matching index
    is the target in both.
    """
    if anchor_emb.shape != positive_emb.shape:
        raise ShapeError(
            f"infonce_loss: anchor {anchor_emb.shape} vs positive {positive_emb.shape}"
        )
    P = anchor_emb.shape[0]
    if P < 2:
        raise ContractError("infonce_loss needs at least 2 pairs (no negatives otherwise)")
    tau = tau if isinstance(tau, Tensor) else Tensor(float(tau))
    if float(tau.data) <= 0:
        raise ContractError("temperature must be positive")
    scores = div(matmul(anchor_emb, transpose(positive_emb, (1, 0))), tau)
    idx = np.arange(P)
    row_term = mean(take_along_last(log_softmax(scores), idx))
    col_term = mean(take_along_last(log_softmax(transpose(scores, (1, 0))), idx))
    return mul(add(row_term, col_term), -0.5)


def note_category_loss(pooled: Tensor, labels: np.ndarray, head: dict[str, Tensor]) -> Tensor:
    """Mean cross-entropy of the depth-2 head on pooled document embeddings."""
    labels = np.asarray(labels)
    n_classes = head["note_head.w2"].shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ContractError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    logits = apply_mlp_head(head, pooled, "note_head")
    return mul(mean(take_along_last(log_softmax(logits), labels)), -1.0)


@dataclass
class ContrastiveConfig:
    # None resolves to sqrt(d_model): raw dot products of pooled embeddings
    # scale with the hidden size, and a fixed small init destabilizes training.
    temperature: float | None = None
    temperature_trainable: bool = True
    weight: float = 0.1
    enable_mlm: bool = True
    enable_contrastive: bool = True

    def __post_init__(self):
        if self.temperature is not None and self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.weight < 0:
            raise ConfigError("contrastive weight must be >= 0")

    def resolve_temperature(self, d_model: int) -> float:
        return math.sqrt(d_model) if self.temperature is None else self.temperature


def joint_loss(l_mlm: Tensor | None, l_contrastive: Tensor | None, cfg: ContrastiveConfig) -> Tensor:
    """Weighted sum of the enabled components."""
    if not cfg.enable_mlm and not cfg.enable_contrastive:
        raise ConfigError("at least one of MLM and the contrastive loss must be enabled")
    total = None
    if cfg.enable_mlm:
        if l_mlm is None:
            raise ContractError("enable_mlm is set but no MLM loss was provided")
        total = l_mlm
    if cfg.enable_contrastive:
        if l_contrastive is None:
            raise ContractError("enable_contrastive is set but no contrastive loss was provided")
        weighted = mul(l_contrastive, cfg.weight)
        total = weighted if total is None else add(total, weighted)
    return total


# -- pre-training loop ---------------------------------------------------------------

OBJECTIVES = ("mlm", "declutr", "note")


@dataclass
class PretrainConfig:
    objective: str = "mlm"
    epochs: int = 1
    batch_size: int = 16
    peak_lr: float = 3e-4
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    mask_prob: float = 0.15
    anchors_per_doc: int = 2
    span_min: int = 4
    span_max: int = 16
    max_steps: int | None = None
    seed: int = 0
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")


@dataclass
class PretrainResult:
    params: dict[str, Tensor]
    heads: dict[str, Tensor]
    trace: list[dict]
    categories: list[str]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def pretrain(
    docs: list[Document],
    vocab: Vocabulary,
    enc_cfg: EncoderConfig,
    cfg: PretrainConfig,
    params: dict[str, Tensor] | None = None,
) -> PretrainResult:
    """Run the chosen objective over the corpus with AdamW and the warmup ramp.

    The span-contrastive path encodes anchors and positives separately and
    pools each; the note path computes both loss components from one forward
    pass per document batch.
    """
    if not docs:
        raise ContractError("pretrain needs a non-empty document list")
    rng = np.random.default_rng(cfg.seed)
    params = params if params is not None else init_params(enc_cfg)
    heads: dict[str, Tensor] = {}
    categories = sorted({d.note_category for d in docs})
    ccfg = cfg.contrastive

    need_mlm = cfg.objective == "mlm" or ccfg.enable_mlm
    if need_mlm:
        head_rng = np.random.default_rng(rng.integers(2**63))
        heads["lm_head.w"] = Tensor(
            head_rng.normal(0.0, 0.02, size=(enc_cfg.d_model, vocab.size)),
            requires_grad=True,
            name="lm_head.w",
        )
        heads["lm_head.b"] = Tensor(
            np.zeros(vocab.size), requires_grad=True, name="lm_head.b"
        )
    if cfg.objective == "note":
        heads.update(
            init_mlp_head(
                enc_cfg.d_model,
                enc_cfg.d_model,
                len(categories),
                np.random.default_rng(rng.integers(2**63)),
                "note_head",
            )
        )
    if cfg.objective == "declutr":
        heads["tau"] = Tensor(
            np.asarray(ccfg.resolve_temperature(enc_cfg.d_model)),
            requires_grad=ccfg.temperature_trainable,
            name="tau",
        )

    # Tokenize once; the contrastive path needs untruncated content tokens.
    if cfg.objective == "declutr":
        content = [tokenize(d, vocab, max_len=None)[1:] for d in docs]
        threshold = min_doc_length(cfg.anchors_per_doc, cfg.span_max)
        pool_idx = [i for i, t in enumerate(content) if len(t) >= threshold]
        if not pool_idx:
            raise SamplingError(
                f"no document reaches the span-sampling minimum of {threshold} tokens"
            )
        n_items = len(pool_idx)
    else:
        token_seqs = [tokenize(d, vocab, max_len=enc_cfg.max_len) for d in docs]
        labels_all = np.array([categories.index(d.note_category) for d in docs])
        n_items = len(docs)

    steps_per_epoch = math.ceil(n_items / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    schedule = ScheduleConfig(
        peak_lr=cfg.peak_lr,
        warmup_steps=int(cfg.warmup_frac * total_steps),
        total_steps=total_steps,
    )

    trainable = {n: p for n, p in params.items() if p.requires_grad}
    opt = AdamW(
        {**trainable, **{n: h for n, h in heads.items() if h.requires_grad}},
        lr=cfg.peak_lr,
        weight_decay=cfg.weight_decay,
    )

    trace: list[dict] = []
    step = 0
    done = False
    for _ in range(cfg.epochs):
        if done:
            break
        epoch_rng = np.random.default_rng(rng.integers(2**63))
        for batch_idx in _batches(n_items, cfg.batch_size, epoch_rng):
            if step >= total_steps:
                done = True
                break
            if cfg.objective == "declutr" and len(batch_idx) * cfg.anchors_per_doc < 2:
                continue  # a tail batch this small has no negatives
            step_seed = int(epoch_rng.integers(2**63))
            if cfg.objective == "mlm":
                l_mlm = _mlm_step(
                    params, enc_cfg, heads, vocab,
                    [token_seqs[i] for i in batch_idx], cfg.mask_prob, step_seed,
                )
                l_con = None
                total = l_mlm
            elif cfg.objective == "note":
                l_mlm, l_con = _note_step(
                    params, enc_cfg, heads, vocab,
                    [token_seqs[i] for i in batch_idx], labels_all[batch_idx],
                    cfg.mask_prob, step_seed, ccfg,
                )
                total = joint_loss(l_mlm, l_con, ccfg)
            else:
                l_mlm, l_con = _declutr_step(
                    params, enc_cfg, heads, vocab,
                    [content[pool_idx[i]] for i in batch_idx], cfg, step_seed,
                )
                total = joint_loss(l_mlm, l_con, ccfg)

            parts = {
                "mlm_loss": None if l_mlm is None else float(l_mlm.data),
                "contrastive_loss": None if l_con is None else float(l_con.data),
            }
            if not np.isfinite(float(total.data)):
                raise TrainingError(f"non-finite loss at step {step}: {parts}")
            lr = lr_at(step, schedule)
            if total.requires_grad:  # a batch can mask zero tokens
                opt.zero_grad()
                backward(total)
                opt.step(lr)
            if "tau" in heads:
                heads["tau"].data = np.maximum(heads["tau"].data, TAU_FLOOR)
            trace.append(
                {
                    "step": step,
                    "lr": lr,
                    "total_loss": float(total.data),
                    **parts,
                    "tau": float(heads["tau"].data) if "tau" in heads else None,
                }
            )
            step += 1
    return PretrainResult(params=params, heads=heads, trace=trace, categories=categories)


def _lm_logits(heads, hidden):
    return add(matmul(hidden, heads["lm_head.w"]), heads["lm_head.b"])


def _mlm_step(params, enc_cfg, heads, vocab, seqs, mask_prob, seed):
    ids, mask = pad_batch(seqs)
    masked = mask_tokens(ids, vocab, mask_prob, seed)
    hidden = encode(params, enc_cfg, masked.input_ids, mask)
    return mlm_loss(masked, _lm_logits(heads, hidden))


def _note_step(params, enc_cfg, heads, vocab, seqs, labels, mask_prob, seed, ccfg):
    ids, mask = pad_batch(seqs)
    if ccfg.enable_mlm:
        masked = mask_tokens(ids, vocab, mask_prob, seed)
        hidden = encode(params, enc_cfg, masked.input_ids, mask)
        l_mlm = mlm_loss(masked, _lm_logits(heads, hidden))
    else:
        hidden = encode(params, enc_cfg, ids, mask)
        l_mlm = None
    l_note = note_category_loss(pool(hidden, mask), labels, heads)
    return l_mlm, l_note


def _declutr_step(params, enc_cfg, heads, vocab, doc_tokens, cfg, seed):
    pairs = sample_span_pairs(
        doc_tokens, cfg.anchors_per_doc, cfg.span_min, cfg.span_max, seed
    )
    a_ids, a_mask = pad_batch(pairs.anchors)
    p_ids, p_mask = pad_batch(pairs.positives)
    ccfg = cfg.contrastive
    if ccfg.enable_mlm:
        masked = mask_tokens(a_ids, vocab, cfg.mask_prob, seed)
        a_hidden = encode(params, enc_cfg, masked.input_ids, a_mask)
        l_mlm = mlm_loss(masked, _lm_logits(heads, a_hidden))
    else:
        a_hidden = encode(params, enc_cfg, a_ids, a_mask)
        l_mlm = None
    p_hidden = encode(params, enc_cfg, p_ids, p_mask)
    l_nce = infonce_loss(pool(a_hidden, a_mask), pool(p_hidden, p_mask), heads["tau"])
    return l_mlm, l_nce


TRACE_FIELDS = ("step", "lr", "total_loss", "mlm_loss", "contrastive_loss", "tau")


def write_trace_csv(trace: list[dict], path, meta: dict | None = None) -> None:
    """Loss trace as CSV; optional ``# key=value`` provenance comment first."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        if meta:
            f.write("# " + " ".join(f"{k}={v}" for k, v in sorted(meta.items())) + "\n")
        writer = csv.writer(f)
        writer.writerow(TRACE_FIELDS)
        for row in trace:
            writer.writerow(
                ["" if row.get(k) is None else f"{row[k]:.8g}" for k in TRACE_FIELDS]
            )
