"""Diagnose embedding spaces beyond task accuracy.

Alignment (same-class pairs close) and uniformity (everything spread out)
summarize the geometry; cosine statistics and the thresholded similarity
graph show structure; K-means indices measure unsupervised separability.
Contrastively trained encoders usually look very different here from
masked-token-only ones.
"""

import numpy as np

from notelab.analysis import (
    alignment,
    cosine_class_stats,
    embed_corpus,
    graph_analysis,
    kmeans_quality,
    uniformity,
)
from notelab.corpus import SynthConfig, build_vocab, generate_corpus, make_splits
from notelab.encoder import EncoderConfig, init_params
from notelab.objectives import ContrastiveConfig, PretrainConfig, pretrain

corpus = generate_corpus(
    SynthConfig(n_docs=1200, n_categories=4, kappa=1.0, length_median=50.0,
                length_sigma=0.4, seed=5)
)
manifest = make_splits(corpus, (0.7, 0.15, 0.15), seed=5)
by_id = {d.id: d for d in corpus}
pre_docs = [by_id[i] for i in manifest.pretrain_ids]
eval_docs = [by_id[i] for i in manifest.eval_ids]
vocab = build_vocab(pre_docs, 2000)
enc_cfg = EncoderConfig(
    layers=2, heads=4, d_model=64, d_ff=256, max_len=48, vocab_size=vocab.size, seed=5
)

spaces = {"random init": init_params(enc_cfg)}
spaces["span contrastive"] = pretrain(
    pre_docs, vocab, enc_cfg,
    PretrainConfig(objective="declutr", epochs=3, batch_size=16, peak_lr=1e-3,
                   span_min=4, span_max=8, seed=5,
                   contrastive=ContrastiveConfig(weight=1.0)),
).params

for name, params in spaces.items():
    emb = embed_corpus(params, enc_cfg, vocab, eval_docs)
    print(f"\n=== {name} ({len(emb)} embeddings) ===")
    print(f"alignment  {alignment(emb):8.3f}  (same-class spread; lower = tighter)")
    print(f"uniformity {uniformity(emb):8.3f}  (overall spread; lower = more uniform)")

    stats = cosine_class_stats(emb)
    within = np.mean([v["mean"] for (a, b), v in stats.items() if a == b])
    between = np.mean([v["mean"] for (a, b), v in stats.items() if a != b])
    print(f"cosine similarity: within-class {within:.3f}, between-class {between:.3f}")

    print("similarity graph:")
    for g in graph_analysis(emb, percentiles=(90, 95, 98, 99)):
        print(
            f"  p{g.percentile:.0f}: threshold {g.threshold:.3f}, "
            f"{g.components} components, top-3 avg degree {g.avg_degree_top:.1f}"
        )

    sweep = kmeans_quality(emb, k_range=(2, 8), seed=5)
    best = max(sweep.reports, key=lambda r: r.silhouette)
    print(
        f"k-means: optimal K = {sweep.optimal_k} "
        f"(silhouette {best.silhouette:.3f}, DBi {best.davies_bouldin:.3f}, "
        f"CHi {best.calinski_harabasz:.1f})"
    )
