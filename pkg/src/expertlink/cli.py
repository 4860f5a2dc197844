"""Operator entry points: corpus synthesis, pre-training, fine-tuning,
evaluation, linking, serving, ablation sweeps, and embedding export.

Every run writes a manifest (resolved config, seed, input content hashes)
into its output directory before doing any work, so identical manifests
reproduce identical outputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig, finetune
from .corpus import ReferenceCorpus, load_corpus
from .encoder import build_vocab
from .evaluation import author_identification, paper_clustering_eval
from .linker import LinkService, link, serve
from .model import LinkingModel
from .pretrain import TrainConfig, pretrain
from .synth import SynthConfig, assemble_queries, load_queries, synth_corpus, write_synth

L_GRID = (1, 4, 7, 10, 13)
N_NEG_GRID = (1, 3, 5, 7, 9)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed: int,
                   inputs: dict[str, str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {name: {"path": str(path), "sha256": _sha256(path)}
                   for name, path in inputs.items()},
        "out_dir": str(out_dir),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        L=args.L, n_neg=args.n_neg, margin=args.margin, batch_size=args.batch_size,
        epochs=args.epochs, lr_encoder=args.lr_encoder, lr_metric=args.lr_metric,
        decay=args.decay, seed=args.seed, max_len_paper=args.max_len_paper,
        per_expert=args.per_expert, d_tok=args.d_tok, d_out=args.d_out,
        min_freq=args.min_freq)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--L", type=int, default=d.L)
    p.add_argument("--n-neg", dest="n_neg", type=int, default=d.n_neg)
    p.add_argument("--margin", type=float, default=d.margin)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=d.batch_size)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr-encoder", dest="lr_encoder", type=float, default=d.lr_encoder)
    p.add_argument("--lr-metric", dest="lr_metric", type=float, default=d.lr_metric)
    p.add_argument("--decay", type=float, default=d.decay)
    p.add_argument("--max-len-paper", dest="max_len_paper", type=int,
                   default=d.max_len_paper)
    p.add_argument("--per-expert", dest="per_expert", type=int, default=d.per_expert)
    p.add_argument("--d-tok", dest="d_tok", type=int, default=d.d_tok)
    p.add_argument("--d-out", dest="d_out", type=int, default=d.d_out)
    p.add_argument("--min-freq", dest="min_freq", type=int, default=d.min_freq)


def _init_model(reference, external, cfg: TrainConfig) -> LinkingModel:
    corpora = [reference] + ([external] if external is not None else [])
    vocab = build_vocab(corpora, min_freq=cfg.min_freq)
    return LinkingModel.init(vocab, cfg.d_tok, cfg.d_out,
                             np.random.default_rng(cfg.seed))


def _run_pretrain(corpus_path, external_path, out_dir: Path, cfg: TrainConfig) -> Path:
    reference = load_corpus(corpus_path, "reference")
    external = load_corpus(external_path, "news") if external_path else None
    model = _init_model(reference, external, cfg)
    pretrain(model, reference, cfg, log_path=out_dir / "pretrain_log.jsonl")
    checkpoint = out_dir / "checkpoint.ckpt"
    model.save(checkpoint, extra_meta={"train_config": dataclasses.asdict(cfg)})
    return checkpoint


# ---------------------------------------------------------------------------
# Commands

def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_experts=args.n_experts, papers_per_expert=args.papers_per_expert,
        queries_per_expert=args.queries_per_expert, vocab_topics=args.vocab_topics,
        collision_size=args.collision_size, mentions_per_expert=args.mentions_per_expert,
        shift=args.shift, seed=args.seed)
    out = Path(args.out)
    write_manifest(out, "synth", dataclasses.asdict(cfg), args.seed, {})
    paths = write_synth(synth_corpus(cfg), out)
    print(json.dumps(paths))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _train_config(args)
    out = Path(args.out)
    inputs = {"corpus": args.corpus}
    if args.external:
        inputs["external"] = args.external
    write_manifest(out, "pretrain", dataclasses.asdict(cfg), args.seed, inputs)
    checkpoint = _run_pretrain(args.corpus, args.external, out, cfg)
    print(json.dumps({"checkpoint": str(checkpoint)}))
    return 0


def cmd_finetune(args) -> int:
    train_cfg = _train_config(args)
    adapt_cfg = AdaptConfig(alpha=args.alpha, beta=args.beta, gamma=args.gamma,
                            batch_size_ext=args.batch_size_ext,
                            epochs=args.finetune_epochs, lr_disc=args.lr_disc,
                            max_len_ext=args.max_len_ext)
    out = Path(args.out)
    write_manifest(out, "finetune",
                   {"train": dataclasses.asdict(train_cfg),
                    "adapt": dataclasses.asdict(adapt_cfg)},
                   args.seed,
                   {"corpus": args.corpus, "external": args.external,
                    "checkpoint": args.checkpoint})
    reference = load_corpus(args.corpus, "reference")
    external = load_corpus(args.external, "news")
    model = LinkingModel.load(args.checkpoint)
    adapted, report = finetune(model, reference, external, adapt_cfg, train_cfg,
                               seed=args.seed,
                               log_path=out / "finetune_log.jsonl")
    checkpoint = out / "checkpoint.ckpt"
    adapted.save(checkpoint)
    probe = {"probe_before": report.probe_before, "probe_after": report.probe_after,
             "steps": report.steps}
    with open(out / "probe.json", "w", encoding="utf-8") as f:
        json.dump(probe, f, indent=2, sort_keys=True)
    print(json.dumps({"checkpoint": str(checkpoint), **probe}))
    return 0


def cmd_eval_ai(args) -> int:
    out = Path(args.out)
    write_manifest(out, "eval-ai",
                   {"paper_cap": args.paper_cap, "candidates": args.candidates},
                   args.seed,
                   {"corpus": args.corpus, "queries": args.queries,
                    "checkpoint": args.checkpoint})
    corpus = load_corpus(args.corpus, "reference")
    model = LinkingModel.load(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    queries = assemble_queries(corpus, load_queries(args.queries),
                               args.candidates, rng)
    report = author_identification(model, queries, corpus,
                                   paper_cap=args.paper_cap, rng=rng)
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump(report.to_obj(), f, indent=2, sort_keys=True)
    print(json.dumps(report.to_obj()))
    return 0


def name_groups(corpus: ReferenceCorpus) -> list[list[str]]:
    """Connected sets of experts reachable through shared name variants."""
    seen: set[str] = set()
    groups = []
    for expert in corpus:
        if expert.id in seen:
            continue
        group = sorted(set(corpus.candidate_set(expert.name)))
        seen.update(group)
        if len(group) >= 2:
            groups.append(group)
    return groups


def cmd_eval_pc(args) -> int:
    out = Path(args.out)
    write_manifest(out, "eval-pc", {}, args.seed,
                   {"corpus": args.corpus, "checkpoint": args.checkpoint})
    corpus = load_corpus(args.corpus, "reference")
    model = LinkingModel.load(args.checkpoint)
    names = []
    for group in name_groups(corpus):
        papers = []
        truth = []
        for expert_id in group:
            for info in corpus.get(expert_id).support:
                papers.append(info)
                truth.append(expert_id)
        names.append((papers, truth))
    report = paper_clustering_eval(model, names)
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump(report.to_obj(), f, indent=2, sort_keys=True)
    print(json.dumps(report.to_obj()))
    return 0


def cmd_link(args) -> int:
    out = Path(args.out)
    write_manifest(out, "link",
                   {"threshold": args.threshold, "paper_cap": args.paper_cap},
                   args.seed,
                   {"corpus": args.corpus, "mentions": args.mentions,
                    "checkpoint": args.checkpoint})
    corpus = load_corpus(args.corpus, "reference")
    mentions = load_corpus(args.mentions, "news")
    model = LinkingModel.load(args.checkpoint)
    hits = 0
    judged = 0
    with open(out / "links.jsonl", "w", encoding="utf-8") as f:
        for mention in mentions:
            result = link(model, mention, corpus, threshold=args.threshold,
                          paper_cap=args.paper_cap)
            f.write(json.dumps(result.to_obj(), sort_keys=True) + "\n")
            if mention.truth_expert_id and result.ranked:
                judged += 1
                hits += result.ranked[0][0] == mention.truth_expert_id
    summary = {"mentions": len(mentions),
               "hr1": hits / judged if judged else None}
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    print(json.dumps(summary))
    return 0


def cmd_serve(args) -> int:
    corpus = load_corpus(args.corpus, "reference")
    model = LinkingModel.load(args.checkpoint)
    service = LinkService(model, corpus, feedback_path=args.feedback_log,
                          threshold=args.threshold, paper_cap=args.paper_cap,
                          snapshot_dir=args.snapshot_dir)
    server = serve(service, host=args.host, port=args.port)
    print(json.dumps({"status": "serving", "port": server.server_address[1]}),
          flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_sweep(args) -> int:
    out = Path(args.out)
    base_cfg = _train_config(args)
    write_manifest(out, "sweep",
                   {"param": args.param, "train": dataclasses.asdict(base_cfg)},
                   args.seed,
                   {"corpus": args.corpus, "queries": args.queries})
    corpus = load_corpus(args.corpus, "reference")
    min_support = min(e.n_support for e in corpus)
    if args.param == "L":
        grid = [v for v in L_GRID if 2 * v <= min_support]
    else:
        grid = list(N_NEG_GRID)

    results = []
    for value in grid:
        cfg = dataclasses.replace(base_cfg, **{"L" if args.param == "L" else "n_neg": value})
        run_dir = out / f"{args.param}={value}"
        run_dir.mkdir(parents=True, exist_ok=True)
        checkpoint = _run_pretrain(args.corpus, args.external, run_dir, cfg)
        model = LinkingModel.load(checkpoint)
        rng = np.random.default_rng(args.seed)
        queries = assemble_queries(corpus, load_queries(args.queries),
                                   args.candidates, rng)
        report = author_identification(model, queries, corpus,
                                       paper_cap=args.paper_cap, rng=rng)
        with open(run_dir / "report.json", "w", encoding="utf-8") as f:
            json.dump(report.to_obj(), f, indent=2, sort_keys=True)
        results.append({"value": value, **report.to_obj()})

    with open(out / "summary.json", "w", encoding="utf-8") as f:
        json.dump({"param": args.param, "results": results}, f,
                  indent=2, sort_keys=True)
    print(json.dumps({"param": args.param, "results": results}))
    return 0


def cmd_export_embeddings(args) -> int:
    from .encoder import export_embeddings
    corpus = load_corpus(args.corpus, "reference")
    model = LinkingModel.load(args.checkpoint)
    rows = []
    for expert in corpus:
        embs = model.embed_items(expert.support, args.max_len_paper)
        rows.extend((f"{expert.id}:{i}", embs[i]) for i in range(len(expert.support)))
    export_embeddings(args.out, rows)
    print(json.dumps({"items": len(rows), "out": str(args.out)}))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expertlink")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-experts", dest="n_experts", type=int, default=50)
    p.add_argument("--papers-per-expert", dest="papers_per_expert", type=int, default=24)
    p.add_argument("--queries-per-expert", dest="queries_per_expert", type=int, default=2)
    p.add_argument("--vocab-topics", dest="vocab_topics", type=int, default=200)
    p.add_argument("--collision-size", dest="collision_size", type=int, default=18)
    p.add_argument("--mentions-per-expert", dest="mentions_per_expert", type=int, default=2)
    p.add_argument("--shift", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="contrastive pre-training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--external", default=None,
                   help="optional external corpus for vocabulary coverage")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="adversarial fine-tuning")
    p.add_argument("--corpus", required=True)
    p.add_argument("--external", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--batch-size-ext", dest="batch_size_ext", type=int, default=256)
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int, default=1)
    p.add_argument("--lr-disc", dest="lr_disc", type=float, default=1e-3)
    p.add_argument("--max-len-ext", dest="max_len_ext", type=int, default=64)
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval-ai", help="author identification ranking")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paper-cap", dest="paper_cap", type=int, default=100)
    p.add_argument("--candidates", type=int, default=18)
    p.set_defaults(func=cmd_eval_ai)

    p = sub.add_parser("eval-pc", help="paper clustering over name groups")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_pc)

    p = sub.add_parser("link", help="link external mentions")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mentions", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--paper-cap", dest="paper_cap", type=int, default=100)
    p.set_defaults(func=cmd_link)

    p = sub.add_parser("serve", help="run the linking service")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--feedback-log", dest="feedback_log", required=True)
    p.add_argument("--snapshot-dir", dest="snapshot_dir", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--paper-cap", dest="paper_cap", type=int, default=100)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("sweep", help="ablation sweep over L or n_neg")
    p.add_argument("--param", choices=("L", "n_neg"), required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--external", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paper-cap", dest="paper_cap", type=int, default=100)
    p.add_argument("--candidates", type=int, default=18)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-embeddings", help="dump frozen item embeddings")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len-paper", dest="max_len_paper", type=int, default=208)
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
