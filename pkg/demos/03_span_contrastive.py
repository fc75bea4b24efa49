"""Adjacent-span contrastive pre-training, step by step.

A document long enough (at least 2 * anchors * max_span tokens) contributes
anchor spans, each paired with a positive span sampled immediately next to
it. Spans are pooled into embeddings and a symmetric InfoNCE loss pulls each
anchor toward its own positive and away from every other positive in the
batch.
"""

import numpy as np

from notelab.corpus import SynthConfig, build_vocab, generate_corpus, tokenize
from notelab.encoder import EncoderConfig
from notelab.nn import Tensor
from notelab.objectives import (
    ContrastiveConfig,
    PretrainConfig,
    infonce_loss,
    min_doc_length,
    pretrain,
    sample_span_pairs,
)

corpus = generate_corpus(
    SynthConfig(n_docs=400, kappa=1.0, length_median=60.0, length_sigma=0.4, seed=2)
)
vocab = build_vocab(corpus, 2000)

# --- what sampling does -------------------------------------------------------
anchors_per_doc, s_min, s_max = 2, 4, 8
threshold = min_doc_length(anchors_per_doc, s_max)
doc_tokens = [tokenize(d, vocab, max_len=None)[1:] for d in corpus[:6]]
print(f"eligibility threshold: {threshold} tokens")
batch = sample_span_pairs(doc_tokens, anchors_per_doc, s_min, s_max, seed=0)
for (di, a0, a1), (dj, p0, p1) in zip(batch.anchor_spans[:4], batch.positive_spans[:4]):
    side = "after" if p0 == a1 else "before"
    print(f"  doc {di} (len {len(doc_tokens[di])}): anchor [{a0},{a1}) + positive [{p0},{p1}) ({side})")

# --- the loss on a toy batch ---------------------------------------------------
rng = np.random.default_rng(0)
perfect = rng.normal(size=(4, 8))
print("\nInfoNCE on 4 pairs, temperature 1:")
print(f"  anchors == positives (easy):   {infonce_loss(Tensor(perfect), Tensor(perfect.copy()), 0.1).item():.4f}")
print(f"  random pairing (chance ln4):   {infonce_loss(Tensor(perfect), Tensor(rng.normal(size=(4, 8))), 1.0).item():.4f}")

# --- joint training (masked-token loss on anchors + InfoNCE) --------------------
enc_cfg = EncoderConfig(
    layers=2, heads=4, d_model=64, d_ff=256, max_len=32, vocab_size=vocab.size, seed=2
)
result = pretrain(
    corpus, vocab, enc_cfg,
    PretrainConfig(
        objective="declutr",
        epochs=3,
        batch_size=16,
        peak_lr=1e-3,
        span_min=s_min,
        span_max=s_max,
        seed=2,
        contrastive=ContrastiveConfig(weight=1.0),
    ),
)
first, last = result.trace[0], result.trace[-1]
print(f"\njoint training, {len(result.trace)} steps:")
print(f"  masked-token loss {first['mlm_loss']:.3f} -> {last['mlm_loss']:.3f}")
print(f"  contrastive loss  {first['contrastive_loss']:.3f} -> {last['contrastive_loss']:.3f}")
print(f"  learned temperature {last['tau']:.3f}")
