"""Command-line surface: corpus synthesis, splitting, pre-training, fine-tuning,
embedding, analysis, and the pretraining-objective x fine-tune-setting matrix.

Progress goes to stderr; machine-readable outputs go to files under the output
root (the NOTELAB_OUT environment variable prefixes relative roots). Every
artifact records the resolved-config digest, the seed, and a format version.
Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

from . import analysis as ana
from .corpus import (
    SplitManifest,
    SynthConfig,
    Vocabulary,
    build_vocab,
    generate_corpus,
    load_jsonl,
    make_splits,
    save_jsonl,
)
from .downstream import FinetuneConfig, TaskSpec, finetune_sequence
from .encoder import (
    EncoderConfig,
    FreezeSpec,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .errors import ConfigError, NotelabError
from .objectives import ContrastiveConfig, PretrainConfig, pretrain, write_trace_csv

ARTIFACT_VERSION = 1

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out": "runs/exp",
    "synth": {
        "n_docs": 2000,
        "n_categories": 8,
        "n_triage": 4,
        "background_words": 1500,
        "signature_words": 30,
        "kappa": 1.0,
        "length_median": 40.0,
        "length_sigma": 0.5,
    },
    "split": {"fractions": [0.6, 0.2, 0.2]},
    "vocab": {"max_size": 2000},
    "encoder": {
        "layers": 4,
        "heads": 4,
        "d_model": 128,
        "d_ff": 512,
        "max_len": 128,
        "dropout": 0.0,
    },
    "pretrain": {
        "objective": "mlm",
        "epochs": 1,
        "batch_size": 16,
        "peak_lr": 3e-4,
        "warmup_frac": 0.1,
        "weight_decay": 0.01,
        "mask_prob": 0.15,
        "anchors_per_doc": 2,
        "span_min": 4,
        "span_max": 16,
        "max_steps": None,
        "contrastive": {
            "temperature": None,  # None = sqrt(d_model)
            "temperature_trainable": True,
            "weight": None,  # None = 1.0 for declutr, 0.1 for note
            "enable_mlm": True,
            "enable_contrastive": True,
        },
    },
    "finetune": {
        "task": "category",
        "freeze": "all",
        "samples_per_class": "all",
        "epochs": 5,
        "batch_size": 16,
        "lr": None,
        "weight_decay": 0.01,
    },
    "analyze": {
        "metrics": ["align", "uniform", "cosine", "graph", "kmeans"],
        "percentiles": [90, 95, 98, 99],
        "k_range": [2, 10],
        "label_field": None,
    },
    "matrix": {
        "models": ["none", "mlm", "mlm+declutr", "mlm+note"],
        "settings": ["frozen", "finetuned"],
        "frozen_lr": 1e-2,
        "finetuned_lr": 3e-4,
    },
}

_MODEL_OBJECTIVES = {"none": None, "mlm": "mlm", "mlm+declutr": "declutr", "mlm+note": "note"}


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | None, overrides: list[str] | None = None) -> dict:
    """Defaults <- config file <- repeated ``--set section.key=value`` flags."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            with open(p, encoding="utf-8") as f:
                cfg = _deep_merge(cfg, json.load(f))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return cfg


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, default=str).encode("utf-8")
    ).hexdigest()[:16]


def _provenance(cfg: dict) -> dict:
    return {
        "config_digest": config_digest(cfg),
        "seed": cfg["seed"],
        "format_version": ARTIFACT_VERSION,
    }


class Workspace:
    """Resolved paths for one experiment directory."""

    def __init__(self, cfg: dict):
        root = os.environ.get("NOTELAB_OUT", ".")
        self.dir = Path(root) / cfg["out"]
        self.cfg = cfg

    def path(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        return self.dir / name

    @property
    def corpus_path(self) -> Path:
        return self.dir / "corpus.jsonl"

    def require_corpus(self) -> list:
        if not self.corpus_path.exists():
            raise ConfigError(f"corpus not found at {self.corpus_path} (run `synth` first)")
        return load_jsonl(self.corpus_path)

    def require_splits(self) -> SplitManifest:
        p = self.dir / "splits.json"
        if not p.exists():
            raise ConfigError(f"split manifest not found at {p} (run `split` first)")
        return SplitManifest.load(p)

    def require_vocab(self) -> Vocabulary:
        p = self.dir / "vocab.json"
        if not p.exists():
            raise ConfigError(f"vocabulary not found at {p} (run `pretrain` first)")
        with open(p, encoding="utf-8") as f:
            return Vocabulary.from_json(json.load(f))


def log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _write_json(path: Path, payload: dict, cfg: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({**_provenance(cfg), **payload}, f, sort_keys=True, indent=1)


# -- subcommands --------------------------------------------------------------------


def cmd_synth(cfg: dict) -> None:
    ws = Workspace(cfg)
    scfg = SynthConfig(seed=cfg["seed"], **cfg["synth"])
    corpus = generate_corpus(scfg)
    save_jsonl(corpus, ws.path("corpus.jsonl"))
    _write_json(ws.path("corpus.meta.json"), {"n_docs": len(corpus)}, cfg)
    log(f"synth: wrote {len(corpus)} documents to {ws.corpus_path}")


def cmd_split(cfg: dict) -> None:
    ws = Workspace(cfg)
    corpus = ws.require_corpus()
    manifest = make_splits(corpus, tuple(cfg["split"]["fractions"]), seed=cfg["seed"])
    payload = {**manifest.to_json(), **_provenance(cfg)}
    with open(ws.path("splits.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
    log(
        f"split: pretrain/train/eval = {len(manifest.pretrain_ids)}/"
        f"{len(manifest.train_ids)}/{len(manifest.eval_ids)}"
    )


def _encoder_config(cfg: dict, vocab_size: int) -> EncoderConfig:
    return EncoderConfig(vocab_size=vocab_size, seed=cfg["seed"], **cfg["encoder"])


def _model_checkpoint_name(model: str) -> str:
    return f"checkpoint_{model.replace('+', '_')}.bin"


def _pretrain_model(cfg: dict, ws: Workspace, model: str, corpus, manifest, vocab):
    """Train (or just initialize) one model and persist checkpoint + trace."""
    by_id = {d.id: d for d in corpus}
    docs = [by_id[i] for i in manifest.pretrain_ids]
    enc_cfg = _encoder_config(cfg, vocab.size)
    objective = _MODEL_OBJECTIVES[model]
    meta = {**_provenance(cfg), "model": model, "objective": objective or "none"}
    if objective is None:
        params = init_params(enc_cfg)
        save_checkpoint(ws.path(_model_checkpoint_name(model)), enc_cfg, params, {}, meta)
        log(f"pretrain[{model}]: random initialization saved")
        return
    pcfg_dict = dict(cfg["pretrain"])
    ccfg_dict = dict(pcfg_dict.pop("contrastive"))
    if ccfg_dict.get("weight") is None:
        ccfg_dict["weight"] = 1.0 if objective == "declutr" else 0.1
    ccfg = ContrastiveConfig(**ccfg_dict)
    pcfg_dict.pop("objective", None)
    pcfg = PretrainConfig(objective=objective, seed=cfg["seed"], contrastive=ccfg, **pcfg_dict)
    result = pretrain(docs, vocab, enc_cfg, pcfg)
    meta["steps"] = len(result.trace)
    meta["categories"] = result.categories
    save_checkpoint(
        ws.path(_model_checkpoint_name(model)), enc_cfg, result.params, result.heads, meta
    )
    write_trace_csv(result.trace, ws.path(f"trace_{model.replace('+', '_')}.csv"), meta=_provenance(cfg))
    final = result.trace[-1]["total_loss"] if result.trace else float("nan")
    log(f"pretrain[{model}]: {len(result.trace)} steps, final loss {final:.4f}")


def cmd_pretrain(cfg: dict, objective_flag: str | None = None) -> None:
    ws = Workspace(cfg)
    corpus = ws.require_corpus()
    manifest = ws.require_splits()
    objective = objective_flag or cfg["pretrain"]["objective"]
    model = {v: k for k, v in _MODEL_OBJECTIVES.items()}.get(objective)
    if model is None:
        raise ConfigError(f"unknown objective {objective!r}")
    vocab_path = ws.path("vocab.json")
    if vocab_path.exists():
        vocab = ws.require_vocab()
    else:
        by_id = {d.id: d for d in corpus}
        vocab = build_vocab([by_id[i] for i in manifest.pretrain_ids], cfg["vocab"]["max_size"])
        with open(vocab_path, "w", encoding="utf-8") as f:
            json.dump({**vocab.to_json(), **_provenance(cfg)}, f, sort_keys=True)
        log(f"pretrain: built vocabulary of size {vocab.size}")
    _pretrain_model(cfg, ws, model, corpus, manifest, vocab)


def _finetune_once(cfg, ws, model, setting, corpus, manifest, vocab, task_name, samples):
    ck = load_checkpoint(ws.path(_model_checkpoint_name(model)))
    by_id = {d.id: d for d in corpus}
    train_docs = [by_id[i] for i in manifest.train_ids]
    eval_docs = [by_id[i] for i in manifest.eval_ids]
    task = TaskSpec.from_docs(train_docs + eval_docs, task_name)
    fcfg_dict = dict(cfg["finetune"])
    freeze = FreezeSpec.all() if setting == "frozen" else FreezeSpec.none()
    lr = fcfg_dict.get("lr")
    if lr is None:
        lr = cfg["matrix"]["frozen_lr"] if setting == "frozen" else cfg["matrix"]["finetuned_lr"]
    fin_cfg = FinetuneConfig(
        freeze=freeze,
        epochs=fcfg_dict["epochs"],
        batch_size=fcfg_dict["batch_size"],
        lr=lr,
        weight_decay=fcfg_dict["weight_decay"],
        samples_per_class=samples,
        seed=cfg["seed"],
    )
    result = finetune_sequence(ck.params, ck.config, vocab, train_docs, eval_docs, task, fin_cfg)
    return task, fin_cfg, result


def _summary_row(model, setting, report) -> dict:
    return {
        "model": model,
        "setting": setting,
        "accuracy": f"{report.accuracy:.6f}",
        "f1": f"{report.f1_macro:.6f}",
        "auc": f"{report.auc_macro:.6f}",
        "precision": f"{report.precision_macro:.6f}",
        "recall": f"{report.recall_macro:.6f}",
    }


_SUMMARY_FIELDS = ("model", "setting", "accuracy", "f1", "auc", "precision", "recall")


def _write_summary_csv(path: Path, rows: list[dict], cfg: dict) -> None:
    prov = _provenance(cfg)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("# " + " ".join(f"{k}={prov[k]}" for k in sorted(prov)) + "\n")
        writer = csv.DictWriter(f, fieldnames=_SUMMARY_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def cmd_finetune(cfg: dict, freeze_flag: str | None, samples_flag: str | None, task_flag: str | None) -> None:
    ws = Workspace(cfg)
    corpus = ws.require_corpus()
    manifest = ws.require_splits()
    vocab = ws.require_vocab()
    fcfg = cfg["finetune"]
    freeze_text = freeze_flag or fcfg["freeze"]
    samples_text = samples_flag or str(fcfg["samples_per_class"])
    samples = None if samples_text in ("all", "None") else int(samples_text)
    task_name = task_flag or fcfg["task"]
    objective = cfg["pretrain"]["objective"]
    model = {v: k for k, v in _MODEL_OBJECTIVES.items()}[objective]
    setting = "frozen" if FreezeSpec.parse(freeze_text).is_all else "finetuned"

    ck = load_checkpoint(ws.path(_model_checkpoint_name(model)))
    by_id = {d.id: d for d in corpus}
    train_docs = [by_id[i] for i in manifest.train_ids]
    eval_docs = [by_id[i] for i in manifest.eval_ids]
    task = TaskSpec.from_docs(train_docs + eval_docs, task_name)
    fin_cfg = FinetuneConfig(
        freeze=FreezeSpec.parse(freeze_text),
        epochs=fcfg["epochs"],
        batch_size=fcfg["batch_size"],
        lr=fcfg["lr"],
        weight_decay=fcfg["weight_decay"],
        samples_per_class=samples,
        seed=cfg["seed"],
    )
    result = finetune_sequence(ck.params, ck.config, vocab, train_docs, eval_docs, task, fin_cfg)
    stem = f"finetune_{model.replace('+', '_')}_{task_name}_{setting}"
    _write_json(
        ws.path(stem + ".json"),
        {
            "model": model,
            "task": task_name,
            "setting": setting,
            "freeze": fin_cfg.freeze.describe(),
            "best_f1_macro": result.best_f1_macro,
            "best_epoch": result.best_epoch,
            "epochs": [r.to_json() for r in result.reports],
        },
        cfg,
    )
    _write_summary_csv(
        ws.path(stem + ".csv"),
        [_summary_row(model, setting, result.reports[result.best_epoch])],
        cfg,
    )
    log(f"finetune[{model}/{setting}]: best F1 macro {result.best_f1_macro:.4f}")


def _model_flag_to_name(cfg: dict) -> str:
    objective = cfg["pretrain"]["objective"]
    return {v: k for k, v in _MODEL_OBJECTIVES.items()}[objective]


def cmd_embed(cfg: dict, split_flag: str = "eval") -> None:
    ws = Workspace(cfg)
    corpus = ws.require_corpus()
    manifest = ws.require_splits()
    vocab = ws.require_vocab()
    model = _model_flag_to_name(cfg)
    ck = load_checkpoint(ws.path(_model_checkpoint_name(model)))
    by_id = {d.id: d for d in corpus}
    ids = {
        "pretrain": manifest.pretrain_ids,
        "train": manifest.train_ids,
        "eval": manifest.eval_ids,
    }[split_flag]
    docs = [by_id[i] for i in ids]
    emb = ana.embed_corpus(
        ck.params, ck.config, vocab, docs, label_field=cfg["analyze"]["label_field"]
    )
    emb.save(str(ws.path(f"embeddings_{model.replace('+', '_')}_{split_flag}")), meta=_provenance(cfg))
    log(f"embed[{model}]: {len(emb)} embeddings from the {split_flag} split")


def cmd_analyze(cfg: dict, metrics_flag: str | None, split_flag: str = "eval") -> None:
    ws = Workspace(cfg)
    model = _model_flag_to_name(cfg)
    prefix = ws.path(f"embeddings_{model.replace('+', '_')}_{split_flag}")
    if not Path(str(prefix) + ".json").exists():
        raise ConfigError(f"embeddings not found at {prefix}.json (run `embed` first)")
    emb = ana.EmbeddingSet.load(str(prefix))
    wanted = (metrics_flag or ",".join(cfg["analyze"]["metrics"])).split(",")
    acfg = cfg["analyze"]
    payload: dict = {"model": model, "split": split_flag, "n": len(emb)}
    if "align" in wanted:
        payload["alignment"] = ana.alignment(emb)
    if "uniform" in wanted:
        payload["uniformity"] = ana.uniformity(emb)
    if "cosine" in wanted:
        payload["cosine"] = {
            f"{a}|{b}": stats for (a, b), stats in ana.cosine_class_stats(emb).items()
        }
    if "graph" in wanted:
        payload["graph"] = [
            g.to_json() for g in ana.graph_analysis(emb, tuple(acfg["percentiles"]))
        ]
    if "kmeans" in wanted:
        sweep = ana.kmeans_quality(emb, tuple(acfg["k_range"]), seed=cfg["seed"])
        payload["kmeans"] = {
            "reports": [r.to_json() for r in sweep.reports],
            "optimal_k": sweep.optimal_k,
        }
    _write_json(ws.path(f"analysis_{model.replace('+', '_')}_{split_flag}.json"), payload, cfg)
    log(f"analyze[{model}]: wrote {sorted(set(wanted))}")


def cmd_matrix(cfg: dict) -> None:
    """Pretrain every model, fine-tune frozen and full, and emit one summary CSV."""
    ws = Workspace(cfg)
    corpus = ws.require_corpus()
    manifest = ws.require_splits()
    vocab_path = ws.path("vocab.json")
    if vocab_path.exists():
        vocab = ws.require_vocab()
    else:
        by_id = {d.id: d for d in corpus}
        vocab = build_vocab([by_id[i] for i in manifest.pretrain_ids], cfg["vocab"]["max_size"])
        with open(vocab_path, "w", encoding="utf-8") as f:
            json.dump({**vocab.to_json(), **_provenance(cfg)}, f, sort_keys=True)
    rows = []
    errors = {}
    task_name = cfg["finetune"]["task"]
    samples_text = str(cfg["finetune"]["samples_per_class"])
    samples = None if samples_text in ("all", "None") else int(samples_text)
    for model in cfg["matrix"]["models"]:
        try:
            _pretrain_model(cfg, ws, model, corpus, manifest, vocab)
        except NotelabError as e:
            errors[model] = f"pretrain failed: {e}"
            log(f"matrix[{model}]: pretrain failed: {e}")
            continue
        for setting in cfg["matrix"]["settings"]:
            cell = f"{model}/{setting}"
            try:
                task, fin_cfg, result = _finetune_once(
                    cfg, ws, model, setting, corpus, manifest, vocab, task_name, samples
                )
                best = result.reports[result.best_epoch]
                rows.append(_summary_row(model, setting, best))
                _write_json(
                    ws.path(f"matrix_{model.replace('+', '_')}_{setting}.json"),
                    {
                        "model": model,
                        "task": task.name,
                        "setting": setting,
                        "best_f1_macro": result.best_f1_macro,
                        "best_epoch": result.best_epoch,
                        "epochs": [r.to_json() for r in result.reports],
                    },
                    cfg,
                )
                log(f"matrix[{cell}]: best F1 macro {result.best_f1_macro:.4f}")
            except NotelabError as e:
                errors[cell] = str(e)
                log(f"matrix[{cell}]: failed: {e}")
    _write_summary_csv(ws.path("matrix_summary.csv"), rows, cfg)
    if errors:
        _write_json(ws.path("matrix_errors.json"), {"errors": errors}, cfg)
    log(f"matrix: {len(rows)} cells done, {len(errors)} failed")


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="notelab",
        description="Desk-scale pre-training and embedding-analysis workbench.",
    )
    parser.add_argument("--config", help="JSON config file (defaults apply without it)")
    parser.add_argument(
        "--set",
        action="append",
        dest="overrides",
        metavar="KEY.PATH=VALUE",
        help="override a config entry; repeatable",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="generate the synthetic corpus")
    sub.add_parser("split", help="make patient-disjoint splits")
    p = sub.add_parser("pretrain", help="run a pre-training objective")
    p.add_argument("--objective", choices=["mlm", "declutr", "note"])
    p = sub.add_parser("finetune", help="fine-tune on a downstream task")
    p.add_argument("--freeze", help="all | none | <frozen-layer-count>")
    p.add_argument("--samples-per-class", dest="samples", help="N or 'all'")
    p.add_argument("--task", help="label field to classify")
    p = sub.add_parser("embed", help="embed a split with a trained checkpoint")
    p.add_argument("--split", default="eval", choices=["pretrain", "train", "eval"])
    p = sub.add_parser("analyze", help="run embedding-space diagnostics")
    p.add_argument("--metrics", help="comma list: align,uniform,cosine,graph,kmeans")
    p.add_argument("--split", default="eval", choices=["pretrain", "train", "eval"])
    sub.add_parser("matrix", help="run the full objective x setting grid")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "split":
            cmd_split(cfg)
        elif args.command == "pretrain":
            if args.objective:
                cfg["pretrain"]["objective"] = args.objective
            cmd_pretrain(cfg)
        elif args.command == "finetune":
            cmd_finetune(cfg, args.freeze, args.samples, args.task)
        elif args.command == "embed":
            cmd_embed(cfg, args.split)
        elif args.command == "analyze":
            cmd_analyze(cfg, args.metrics, args.split)
        elif args.command == "matrix":
            cmd_matrix(cfg)
    except ConfigError as e:
        log(f"error: {e}")
        return 2
    except NotelabError as e:
        log(f"error: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
