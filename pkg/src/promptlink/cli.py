"""Command-line surface: train, eval, ablate, lar-index, gen-toy."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import kg as kg_mod
from . import toy
from .config import ConfigError, parse_config
from .encoder import Vocabulary
from .lar import build_lar_index
from .model import KGCModel, prepare_queries
from .optim import load_checkpoint
from .training import (TrainConfig, ensemble_evaluate, evaluate_filtered, train)

VARIANTS = ("full", "separated", "no-graph", "non-layerwise", "no-lar",
            "random-lar", "graph-only", "ensemble")


def apply_variant(cfg, variant):
    """Translate an ablation row name into config overrides."""
    cfg = dataclasses.replace(cfg)
    if variant in ("full", "default"):
        return cfg
    if variant == "separated":
        cfg.strategy = "separated"
    elif variant == "no-graph":
        cfg.scorer = "text_only"
    elif variant == "non-layerwise":
        cfg.prompt_mode = "input_only"
    elif variant == "no-lar":
        cfg.alpha = 0.0
    elif variant == "random-lar":
        cfg.lar_source = "random"
    elif variant == "graph-only":
        cfg.graph_only = True
    elif variant.startswith("freeze="):
        spec = variant[len("freeze="):]
        try:
            direction, count = spec.split(":")
            count = int(count)
        except ValueError:
            raise ConfigError(f"bad freeze variant {variant!r}; use freeze=<bottom|top>:<n>") from None
        if direction not in ("bottom", "top"):
            raise ConfigError(f"freeze direction must be bottom or top, got {direction!r}")
        cfg.freeze_direction = direction
        cfg.freeze_count = count
        if count == cfg.enc_layers:
            cfg.freeze_word_embeddings = True
        elif count == 0:
            cfg.freeze_word_embeddings = False
    else:
        raise ConfigError(
            f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)} "
            "or freeze=<bottom|top>:<n>")
    return cfg


def _load_graph(run_cfg):
    graph = kg_mod.load_dataset(run_cfg.require_data_dir(), run_cfg.temporal)
    return kg_mod.augment_inverse(graph)


def _write_report(out_dir, name, report):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    return path


def cmd_train(args):
    run_cfg = parse_config(args.config)
    graph = _load_graph(run_cfg)
    result = train(graph, run_cfg.train, out_dir=run_cfg.out_dir, quiet=args.quiet)
    qa_valid = prepare_queries(graph, result.vocab, graph.valid,
                               run_cfg.train.strategy, run_cfg.train.max_text_len)
    report = evaluate_filtered(result.model, qa_valid, result.filter_index,
                               run_cfg.train.eval_batch)
    path = _write_report(run_cfg.out_dir, "valid_report.json", report)
    print(f"best valid MRR {result.best_valid_mrr:.4f} at epoch {result.best_epoch}; "
          f"checkpoint {result.checkpoint_path}; report {path}")
    return 0


def _model_from_checkpoint(checkpoint_path, graph):
    arrays, echo = load_checkpoint(checkpoint_path)
    field_names = {f.name for f in dataclasses.fields(TrainConfig)}
    cfg = TrainConfig(**{k: v for k, v in echo.items() if k in field_names})
    if echo.get("n_entities") not in (None, graph.n_entities):
        raise ConfigError(
            f"checkpoint was trained on {echo['n_entities']} entities, "
            f"dataset has {graph.n_entities}")
    vocab = Vocabulary.from_graph(graph)
    model = KGCModel(graph, vocab, cfg, seed=cfg.seed)
    model.load_state(arrays)
    return model, vocab, cfg


def cmd_eval(args):
    run_cfg = parse_config(args.config)
    graph = _load_graph(run_cfg)
    model, vocab, cfg = _model_from_checkpoint(args.checkpoint, graph)
    facts = graph.valid if args.split == "valid" else graph.test
    qa = prepare_queries(graph, vocab, facts, cfg.strategy, cfg.max_text_len)
    filter_index = kg_mod.build_filter_index(graph)
    report = evaluate_filtered(model, qa, filter_index, cfg.eval_batch)
    path = _write_report(run_cfg.out_dir, f"report_{args.split}.json", report)
    print(report.to_json())
    print(f"report written to {path}")
    return 0


def cmd_ablate(args):
    run_cfg = parse_config(args.config)
    graph = _load_graph(run_cfg)
    out_dir = os.path.join(run_cfg.out_dir,
                           args.variant.replace("=", "_").replace(":", "_"))
    filter_index = kg_mod.build_filter_index(graph)

    if args.variant == "ensemble":
        cfg_graph = apply_variant(run_cfg.train, "graph-only")
        cfg_text = apply_variant(run_cfg.train, "no-graph")
        res_graph = train(graph, cfg_graph, out_dir=os.path.join(out_dir, "graph_only"),
                          quiet=args.quiet)
        res_text = train(graph, cfg_text, out_dir=os.path.join(out_dir, "text_only"),
                         quiet=args.quiet)
        qa = prepare_queries(graph, res_graph.vocab, graph.test,
                             cfg_text.strategy, cfg_text.max_text_len)
        report = ensemble_evaluate(res_graph.model, res_text.model, qa, filter_index,
                                   run_cfg.train.eval_batch)
    else:
        cfg = apply_variant(run_cfg.train, args.variant)
        result = train(graph, cfg, out_dir=out_dir, quiet=args.quiet)
        qa = prepare_queries(graph, result.vocab, graph.test, cfg.strategy,
                             cfg.max_text_len)
        report = evaluate_filtered(result.model, qa, filter_index, cfg.eval_batch)

    path = _write_report(out_dir, "report_test.json", report)
    print(f"{args.variant}: test MRR {report.mrr:.4f}; report {path}")
    return 0


def cmd_lar_index(args):
    run_cfg = parse_config(args.config)
    graph = _load_graph(run_cfg)
    index = build_lar_index(graph, run_cfg.train.lar_config())
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(index.dump_lines()) + "\n")
    print(f"wrote {len(index)} entity rows to {args.out}")
    return 0


def cmd_gen_toy(args):
    size = toy.ToySize(n_base_names=args.base_names, n_cities=args.cities,
                       n_countries=args.countries)
    stats = toy.generate_toy_kg(args.out, seed=args.seed, size=size)
    print(json.dumps(stats))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="promptlink",
                                description="Knowledge-graph completion with "
                                            "conditional soft prompts")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and keep the best-valid-MRR checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint under the filtered setting")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("valid", "test"), default="test")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and test one ablation variant")
    a.add_argument("--config", required=True)
    a.add_argument("--variant", required=True,
                   help=f"one of {', '.join(VARIANTS)} or freeze=<bottom|top>:<n>")
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(fn=cmd_ablate)

    li = sub.add_parser("lar-index", help="dump the token-overlap adversary index")
    li.add_argument("--config", required=True)
    li.add_argument("--out", required=True)
    li.set_defaults(fn=cmd_lar_index)

    g = sub.add_parser("gen-toy", help="generate the synthetic toy dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--base-names", type=int, default=17)
    g.add_argument("--cities", type=int, default=12)
    g.add_argument("--countries", type=int, default=6)
    g.set_defaults(fn=cmd_gen_toy)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, kg_mod.DataError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
