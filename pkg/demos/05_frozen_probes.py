"""Compare frozen-encoder probes against full fine-tuning, few-shot style.

The frozen protocol treats the encoder as a fixed feature extractor: only the
depth-2 classification head trains, so embedding quality is what's measured.
Sweeping the number of labeled examples per class shows how far pre-trained
features stretch when annotation is scarce.
"""

from notelab.corpus import SynthConfig, build_vocab, generate_corpus, make_splits
from notelab.downstream import FinetuneConfig, TaskSpec, finetune_sequence
from notelab.encoder import EncoderConfig, FreezeSpec, init_params
from notelab.objectives import PretrainConfig, pretrain

corpus = generate_corpus(
    SynthConfig(n_docs=1500, n_categories=4, kappa=1.0, signature_words=24,
                length_median=20.0, seed=4)
)
manifest = make_splits(corpus, (0.5, 0.25, 0.25), seed=4)
by_id = {d.id: d for d in corpus}
pre_docs = [by_id[i] for i in manifest.pretrain_ids]
train_docs = [by_id[i] for i in manifest.train_ids]
eval_docs = [by_id[i] for i in manifest.eval_ids]
vocab = build_vocab(pre_docs, 2000)
enc_cfg = EncoderConfig(
    layers=2, heads=4, d_model=64, d_ff=256, max_len=32, vocab_size=vocab.size, seed=4
)
task = TaskSpec.from_docs(corpus, "category")

print("pre-training a masked-token encoder on the pretrain split...")
pretrained = pretrain(
    pre_docs, vocab, enc_cfg,
    PretrainConfig(objective="mlm", epochs=2, batch_size=16, peak_lr=1e-3, seed=4),
).params
random_params = init_params(enc_cfg)

print(f"\nfrozen-probe F1 macro by examples-per-class ({task.n_classes} classes):")
print(f"{'k':>6} {'random init':>12} {'pretrained':>12}")
for k in (8, 32, 128):
    row = []
    for params in (random_params, pretrained):
        cfg = FinetuneConfig(
            freeze=FreezeSpec.all(), epochs=5, batch_size=16, lr=1e-2,
            samples_per_class=k, seed=4,
        )
        result = finetune_sequence(params, enc_cfg, vocab, train_docs, eval_docs, task, cfg)
        row.append(result.best_f1_macro)
    print(f"{k:>6} {row[0]:>12.3f} {row[1]:>12.3f}")

print("\nfull fine-tuning (encoder unfrozen, lower learning rate):")
cfg = FinetuneConfig(freeze=FreezeSpec.none(), epochs=2, batch_size=16, lr=3e-4,
                     samples_per_class=128, seed=4)
result = finetune_sequence(pretrained, enc_cfg, vocab, train_docs, eval_docs, task, cfg)
print(f"  pretrained, k=128: F1 macro {result.best_f1_macro:.3f}")
