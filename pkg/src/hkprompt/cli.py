"""Command-line entry points.

Subcommands: gen-synthetic, prepare-kg, train, eval, ablate,
export-embeddings. Exit codes: 0 success, 1 validation error (bad arguments
or missing inputs), 2 runtime failure. Settings resolve as defaults <
--config file (key=value lines) < explicit flags.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import torch

from .kg import load_catalog, load_triples, save_catalog, save_embeddings, save_triples
from .losses import LossWeights, load_explanations
from .manifest import RunManifest
from .metrics import metric_report
from .model import (
    KnowledgePipeline,
    ModelConfig,
    PromptModel,
    load_checkpoint,
    save_checkpoint,
)
from .synthetic import generate_synthetic, split_for_run
from .taxonomy import load_taxonomy_file
from .text import Vocab
from .training import (
    Trainer,
    TrainConfig,
    gold_label_sets,
    load_corpus,
    save_corpus,
)

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.pt"

DEFAULTS: dict = {
    # synthetic generation
    "depth": 2,
    "branching": (3, 3),
    "docs_per_leaf": 50,
    "vocab_size": 200,
    "noise_rate": 0.3,
    # model
    "d_model": 64,
    "n_blocks": 2,
    "n_heads": 4,
    "max_len": 256,
    # optimization defaults sized for a pretrained encoder; from-scratch
    # synthetic runs usually override learning_rate via --config
    "shots": 8,
    "batch_size": 8,
    "learning_rate": 4e-5,
    "max_epochs": 50,
    "patience": 10,
    "mask_rate": 0.15,
    "threshold": 0.5,
    # loss weights
    "alpha": 0.1,
    "beta": None,  # resolved per mode: 0.2 single_path, 0.1 multi_path
    "tau": 1.0,
    "topk": 3,
    "lambda_per_level": None,
    "mode": "single_path",
    "sibling_mode": "separating",
    "mine_siblings_only": False,
    "trainable_structural": False,
    # knowledge pipeline
    "k_neighbors": 3,
    "walks_per_node": 10,
    "walk_length": 20,
    "window": 5,
    "negatives": 5,
    "node2vec_epochs": 5,
    "dev_fraction": 0.25,
    "seed": 0,
}


class CliError(Exception):
    """Validation problem; maps to exit code 1."""


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key == "branching":
        return tuple(int(x) for x in raw.split(",") if x)
    if key == "lambda_per_level":
        return None if raw.lower() == "none" else [float(x) for x in raw.split(",") if x]
    if key in ("mode", "sibling_mode"):
        return raw
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def load_config_file(path: str) -> dict:
    """key=value lines; '#' starts a comment; unknown keys are rejected."""
    out: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _parse_value(key, raw)
    return out


def resolve_settings(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        _require_file(args.config, "config")
        settings.update(load_config_file(args.config))
    for flag in ("seed", "shots", "alpha", "beta", "tau", "topk", "mode", "sibling_mode"):
        value = getattr(args, flag, None)
        if value is not None:
            settings[flag] = value
    if settings["beta"] is None:
        settings["beta"] = 0.1 if settings["mode"] == "multi_path" else 0.2
    return settings


def _require_file(path: str | None, what: str) -> str:
    if not path:
        raise CliError(f"missing required --{what} PATH")
    if not os.path.exists(path):
        raise CliError(f"{what} file not found: {path}")
    return path


def _weights(settings: dict) -> LossWeights:
    return LossWeights(
        alpha=settings["alpha"],
        beta=settings["beta"],
        tau=settings["tau"],
        lambda_per_level=settings["lambda_per_level"],
        topk_hard=settings["topk"],
    )


def _train_config(settings: dict, use_knowledge: bool) -> TrainConfig:
    return TrainConfig(
        shots=settings["shots"],
        batch_size=settings["batch_size"],
        learning_rate=settings["learning_rate"],
        max_epochs=settings["max_epochs"],
        patience=settings["patience"],
        seed=settings["seed"],
        weights=_weights(settings),
        path_mode=settings["mode"],
        sibling_mode=settings["sibling_mode"],
        mask_rate=settings["mask_rate"],
        threshold=settings["threshold"],
        use_knowledge=use_knowledge,
        mine_siblings_only=settings["mine_siblings_only"],
        trainable_structural=settings["trainable_structural"],
    )


def _pipeline(settings: dict, catalog, triples) -> KnowledgePipeline:
    return KnowledgePipeline(
        catalog,
        triples,
        d_model=settings["d_model"],
        k_neighbors=settings["k_neighbors"],
        seed=settings["seed"],
        walks_per_node=settings["walks_per_node"],
        walk_length=settings["walk_length"],
        window=settings["window"],
        negatives=settings["negatives"],
        epochs=settings["node2vec_epochs"],
    )


# ── subcommands ──────────────────────────────────────────────────────────

def cmd_gen_synthetic(args) -> int:
    settings = resolve_settings(args)
    out = args.out
    os.makedirs(out, exist_ok=True)
    data = generate_synthetic(
        depth=settings["depth"],
        branching=tuple(settings["branching"]),
        docs_per_leaf=settings["docs_per_leaf"],
        vocab_size=settings["vocab_size"],
        noise_rate=settings["noise_rate"],
        seed=settings["seed"],
    )
    save_corpus(data.corpus, data.taxonomy, os.path.join(out, "corpus.jsonl"))
    with open(os.path.join(out, "taxonomy.tsv"), "w", encoding="utf-8") as fh:
        for node in data.taxonomy.nodes:
            parent = (
                "ROOT" if node.parent is None else data.taxonomy.name_of(node.parent)
            )
            fh.write(f"{node.name}\t{parent}\n")
    save_triples(data.triples, os.path.join(out, "kg.tsv"))
    save_catalog(data.catalog, os.path.join(out, "catalog.tsv"))
    with open(os.path.join(out, "explanations.tsv"), "w", encoding="utf-8") as fh:
        for label, tokens in sorted(data.explanations.items()):
            fh.write(f"{data.taxonomy.name_of(label)}\t{' '.join(tokens)}\n")
    print(
        f"wrote {len(data.corpus)} documents, {len(data.taxonomy)} labels, "
        f"{len(data.triples)} triples to {out}"
    )
    return 0


def cmd_prepare_kg(args) -> int:
    settings = resolve_settings(args)
    taxonomy = load_taxonomy_file(_require_file(args.taxonomy, "taxonomy"))
    corpus = load_corpus(_require_file(args.dataset, "dataset"), taxonomy)
    catalog = load_catalog(_require_file(args.catalog, "catalog"))
    triples = load_triples(_require_file(args.kg, "kg"))
    os.makedirs(args.out, exist_ok=True)
    pipeline = _pipeline(settings, catalog, triples)
    pipeline.fit(corpus)
    if pipeline.table is None:
        raise CliError("no entities linked; nothing to embed")
    out_path = os.path.join(args.out, "embeddings.tsv")
    save_embeddings(pipeline.table, out_path)
    print(f"wrote {sum(1 for _ in pipeline.table.items())} embeddings to {out_path}")
    return 0


def _run_training(args, ablation: str | None) -> int:
    from . import report as report_mod

    settings = resolve_settings(args)
    use_knowledge = True
    if ablation == "kh-infonce":
        settings["alpha"] = 0.0
    elif ablation == "scl":
        settings["beta"] = 0.0
    elif ablation == "hk-encoder":
        use_knowledge = False
    elif ablation is not None:
        raise CliError(f"unknown ablation target {ablation!r}")

    taxonomy = load_taxonomy_file(_require_file(args.taxonomy, "taxonomy"))
    corpus = load_corpus(_require_file(args.dataset, "dataset"), taxonomy)
    explanations = load_explanations(
        _require_file(args.explanations, "explanations"), taxonomy
    )
    catalog = load_catalog(_require_file(args.catalog, "catalog")) if use_knowledge else []
    triples = load_triples(_require_file(args.kg, "kg")) if use_knowledge else []
    os.makedirs(args.out, exist_ok=True)

    started = time.time()
    train_docs, dev_docs, test_docs = split_for_run(
        corpus, taxonomy, shots=settings["shots"], seed=settings["seed"],
        dev_fraction=settings["dev_fraction"],
    )
    vocab = Vocab.build(
        [d.text for d in corpus],
        depth=taxonomy.depth,
        extra=[t for tokens in explanations.values() for t in tokens],
    )
    model = PromptModel(
        vocab,
        taxonomy,
        ModelConfig(
            d_model=settings["d_model"],
            n_blocks=settings["n_blocks"],
            n_heads=settings["n_heads"],
            max_len=settings["max_len"],
            seed=settings["seed"],
        ),
    )
    model.attach_verbalizer(explanations)
    pipeline = None
    if use_knowledge:
        pipeline = _pipeline(settings, catalog, triples)
        pipeline.fit(train_docs)
    trainer = Trainer(model, pipeline, _train_config(settings, use_knowledge))
    history = trainer.fit(train_docs, dev_docs)
    final_test = trainer.evaluate(test_docs)

    save_corpus(train_docs, taxonomy, os.path.join(args.out, "train.jsonl"))
    save_corpus(dev_docs, taxonomy, os.path.join(args.out, "dev.jsonl"))
    save_corpus(test_docs, taxonomy, os.path.join(args.out, "test.jsonl"))
    vocab.save(os.path.join(args.out, "vocab.txt"))
    save_checkpoint(
        os.path.join(args.out, CHECKPOINT_NAME),
        model,
        pipeline.table if pipeline is not None else None,
        extras={
            "settings": {k: list(v) if isinstance(v, tuple) else v for k, v in settings.items()},
            "use_knowledge": use_knowledge,
            "ablation": ablation,
        },
    )
    manifest = RunManifest(
        config={
            **{k: list(v) if isinstance(v, tuple) else v for k, v in settings.items()},
            "dataset": args.dataset,
            "taxonomy": args.taxonomy,
            "use_knowledge": use_knowledge,
        },
        seeds={"seed": settings["seed"]},
        epochs=history["epochs"],
        final_test=final_test,
        ablation=ablation,
        wall_clock_sec=time.time() - started,
    )
    manifest.save(args.out)
    report_mod.write_history_tsv(history["epochs"], os.path.join(args.out, "history.tsv"))
    report_mod.write_report(final_test, args.out, "report")
    report_mod.save_run_figures(history["epochs"], final_test, args.out)
    print(
        f"trained {len(history['epochs'])} epochs; "
        f"test micro_f1={final_test['micro_f1']:.4f} macro_f1={final_test['macro_f1']:.4f}; "
        f"artifacts in {args.out}"
    )
    return 0


def cmd_train(args) -> int:
    return _run_training(args, ablation=None)


def cmd_ablate(args) -> int:
    if not args.remove:
        raise CliError("ablate requires --remove {kh-infonce,hk-encoder,scl}")
    return _run_training(args, ablation=args.remove)


def _load_predictions(path: str, taxonomy) -> dict[str, set[int]]:
    import json as _json

    preds: dict[str, set[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = _json.loads(line)
            preds[str(row["id"])] = {taxonomy.id_of(name) for name in row["labels"]}
    return preds


def cmd_eval(args) -> int:
    from . import report as report_mod

    taxonomy = load_taxonomy_file(_require_file(args.taxonomy, "taxonomy"))
    docs = load_corpus(_require_file(args.dataset, "dataset"), taxonomy)
    os.makedirs(args.out, exist_ok=True)
    gold = gold_label_sets(docs)

    if args.predictions:
        _require_file(args.predictions, "predictions")
        by_id = _load_predictions(args.predictions, taxonomy)
        missing = [d.id for d in docs if d.id not in by_id]
        if missing:
            raise CliError(f"predictions missing document ids: {missing[:5]}")
        pred = [by_id[d.id] for d in docs]
    else:
        ckpt_path = os.path.join(args.out, CHECKPOINT_NAME)
        _require_file(ckpt_path, "out/" + CHECKPOINT_NAME)
        model, table, extras = load_checkpoint(ckpt_path, taxonomy)
        settings = {**DEFAULTS, **extras["settings"]}
        pipeline = None
        if extras["use_knowledge"]:
            catalog = load_catalog(_require_file(args.catalog, "catalog"))
            triples = load_triples(_require_file(args.kg, "kg"))
            pipeline = _pipeline(settings, catalog, triples)
            pipeline.load_table(table)
        trainer = Trainer(
            model, pipeline, _train_config(settings, extras["use_knowledge"])
        )
        pred = trainer.predict(docs)

    report = metric_report(gold, pred, taxonomy)
    report_mod.write_report(report, args.out, "eval_report")
    report_mod.save_level_accuracy_bar(
        report, os.path.join(args.out, "eval_level_accuracy.png")
    )
    print(
        f"evaluated {len(docs)} documents: micro_f1={report['micro_f1']:.4f} "
        f"macro_f1={report['macro_f1']:.4f}"
    )
    return 0


def cmd_export_embeddings(args) -> int:
    taxonomy = load_taxonomy_file(_require_file(args.taxonomy, "taxonomy"))
    ckpt_path = os.path.join(args.out, CHECKPOINT_NAME)
    _require_file(ckpt_path, "out/" + CHECKPOINT_NAME)
    model, table, extras = load_checkpoint(ckpt_path, taxonomy)

    # same two-column layout as the kg embedding TSV: key, space-joined values
    rows_path = os.path.join(args.out, "verbalizer_rows.tsv")
    with open(rows_path, "w", encoding="utf-8") as fh:
        for level, vocab_ids in enumerate(taxonomy.level_vocab):
            weight = model.verbalizer.weights[level].detach()
            for i, label in enumerate(vocab_ids):
                values = " ".join(repr(x) for x in weight[i].tolist())
                fh.write(f"{taxonomy.name_of(label)}\t{values}\n")
    written = [rows_path]

    if args.dataset:
        docs = load_corpus(_require_file(args.dataset, "dataset"), taxonomy)
        settings = {**DEFAULTS, **extras["settings"]}
        pipeline = None
        if extras["use_knowledge"]:
            catalog = load_catalog(_require_file(args.catalog, "catalog"))
            triples = load_triples(_require_file(args.kg, "kg"))
            pipeline = _pipeline(settings, catalog, triples)
            pipeline.load_table(table)
        trainer = Trainer(
            model, pipeline, _train_config(settings, extras["use_knowledge"])
        )
        states_path = os.path.join(args.out, "doc_mask_states.tsv")
        with open(states_path, "w", encoding="utf-8") as fh:
            with torch.no_grad():
                for start in range(0, len(docs), 16):
                    part = docs[start : start + 16]
                    h_k, h_p, h_n = trainer._mask_states(part)
                    for i, doc in enumerate(part):
                        for kind, states in (
                            ("knowledge", h_k), ("positive", h_p), ("negative", h_n),
                        ):
                            for level in range(taxonomy.depth):
                                values = " ".join(
                                    repr(x) for x in states[i, level].tolist()
                                )
                                key = f"{doc.id}|{kind}|{level + 1}"
                                fh.write(f"{key}\t{values}\n")
        written.append(states_path)
    print("wrote " + ", ".join(written))
    return 0


# ── argument parsing ─────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hkprompt",
        description="Few-shot hierarchical text classification with "
        "knowledge-aware contrastive prompts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, *, paths=True, tuning=True):
        p.add_argument("--config", metavar="PATH", help="key=value settings file")
        p.add_argument("--seed", type=int, metavar="INT")
        p.add_argument("--out", required=True, metavar="DIR")
        if paths:
            p.add_argument("--dataset", metavar="PATH")
            p.add_argument("--taxonomy", metavar="PATH")
            p.add_argument("--kg", metavar="PATH")
            p.add_argument("--catalog", metavar="PATH")
        if tuning:
            p.add_argument("--shots", type=int, metavar="INT")
            p.add_argument("--alpha", type=float, metavar="REAL")
            p.add_argument("--beta", type=float, metavar="REAL")
            p.add_argument("--tau", type=float, metavar="REAL")
            p.add_argument("--topk", type=int, metavar="INT")
            p.add_argument("--mode", choices=["single_path", "multi_path"])
            p.add_argument("--sibling-mode", dest="sibling_mode",
                           choices=["literal", "separating"])

    p = sub.add_parser("gen-synthetic", help="write a synthetic corpus + KG")
    add_common(p, paths=False, tuning=False)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("prepare-kg", help="link corpus, embed subgraph, export TSV")
    add_common(p, tuning=False)
    p.set_defaults(func=cmd_prepare_kg)

    p = sub.add_parser("train", help="k-shot training run")
    add_common(p)
    p.add_argument("--explanations", metavar="PATH")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train with one component removed")
    add_common(p)
    p.add_argument("--explanations", metavar="PATH")
    p.add_argument("--remove", choices=["kh-infonce", "hk-encoder", "scl"])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="score a checkpoint or a predictions file")
    add_common(p, tuning=False)
    p.add_argument("predictions", nargs="?", default=None,
                   help="optional JSONL {'id','labels'} predictions to score")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings",
                       help="dump verbalizer rows and per-doc mask states")
    add_common(p, tuning=False)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def run_command(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors; map errors to 1
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failure boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
