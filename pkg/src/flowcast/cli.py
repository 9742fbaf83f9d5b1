"""Command-line front end.

One executable, `flowcast`, with subcommands for each pipeline stage plus the
two orchestrated phases. Exit codes: 0 success, 2 configuration problem,
3 stage failure (a stage ran and broke). Single-stage commands use desk-scale
defaults; pass --config with a pipeline JSON file to override model settings.

FLOWCAST_DATA_ROOT overrides the run directory named in the config file.
"""
from __future__ import annotations

import argparse
import json
import sys

from .bpe import load_vocab, save_vocab, train_bpe
from .classifier import (
    ClassifierConfig, classify, load_classifier, save_classifier,
    train_classifier,
)
from .errors import ConfigError, FlowcastError, StageFailure
from .evaluator import (
    PairEvaluatorModel, build_pair_dataset, classify_pair, evaluate_pairs,
    finetune_pair, load_evaluator, pretrain_mlm, read_pairs, save_evaluator,
    write_pairs,
)
from .features import PipelineParams, fit_pipeline
from .generator import (
    GenerationPolicy, build_windows, load_generator, predict_next_packet,
    save_generator, train_generator,
)
from .ingest import parse_pcap, read_csv, write_csv
from .manifest import to_binary
from .metrics import compute_metrics, plot_losses, plot_roc, render_report
from .pipeline import (
    PipelineConfig, _flow_line_lists, _sequences_for, _split_records,
    classifier_config, deploy_run, dev_run, evaluator_config, generator_config,
)
from .synth import DEV_MIX, SynthSpec, generate, profile_table


def _config_from(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return PipelineConfig.from_file(args.config)
    return PipelineConfig()


def _print_json(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


# --- single-stage commands ---

def cmd_synth(args) -> int:
    spec = SynthSpec(n_flows=args.flows, mix=dict(DEV_MIX), seed=args.seed)
    records, _ = generate(spec)
    write_csv(records, args.out)
    if args.profiles:
        with open(args.profiles, "w") as fh:
            json.dump(profile_table(), fh, indent=2, sort_keys=True)
    print(f"wrote {len(records)} packets in {args.flows} flows to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    result = parse_pcap(args.pcap, label=args.label)
    write_csv(result.records, args.out)
    print(f"parsed {len(result.records)} packets "
          f"({result.skipped} skipped) to {args.out}")
    return 0


def cmd_features(args) -> int:
    records = read_csv(args.data)
    _, params = fit_pipeline(records, var_threshold=args.var_threshold,
                             corr_threshold=args.corr_threshold,
                             window=args.window)
    params.save(args.params)
    print(f"selected {len(params.selected)} columns -> {args.params}")
    return 0


def cmd_tokenize(args) -> int:
    records = read_csv(args.data)
    params = PipelineParams.load(args.params)
    lines = [ln for f in _flow_line_lists(records, params) for ln in f]
    vocab = train_bpe("\n".join(lines) + "\n", vocab_size=args.vocab_size)
    save_vocab(vocab, args.out)
    print(f"vocabulary of {vocab.size} tokens -> {args.out}")
    return 0


def cmd_train_gpt(args) -> int:
    cfg = _config_from(args)
    params = PipelineParams.load(args.params)
    vocab = load_vocab(args.vocab)
    records = read_csv(args.data)
    train, val, _ = _split_records(records, 1.0 - args.val_fraction, cfg.seed)
    gcfg = generator_config(cfg)
    train_w = build_windows(_flow_line_lists(train, params), vocab,
                            gcfg.max_positions)
    val_w = build_windows(_flow_line_lists(val, params), vocab,
                          gcfg.max_positions)
    log = print if args.verbose else None
    model, history = train_generator(train_w, gcfg, val_w, log=log)
    save_generator(args.out, model)
    if args.history:
        with open(args.history, "w") as fh:
            json.dump(history, fh, indent=2, sort_keys=True)
    print(f"best epoch {history['best_epoch']} "
          f"(val loss {history['best_val_loss']:.4f}) -> {args.out}")
    return 0


def cmd_build_pairs(args) -> int:
    records = read_csv(args.data)
    params = PipelineParams.load(args.params)
    pairs = build_pair_dataset(_flow_line_lists(records, params),
                               neg_ratio=args.neg_ratio, seed=args.seed)
    write_pairs(args.out, pairs)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def cmd_train_bert(args) -> int:
    cfg = _config_from(args)
    vocab = load_vocab(args.vocab)
    train_pairs = read_pairs(args.pairs)
    val_pairs = read_pairs(args.val_pairs)
    ecfg = evaluator_config(cfg)
    model = PairEvaluatorModel(ecfg)
    log = print if args.verbose else None
    if args.mlm_epochs > 0:
        pretrain_mlm(model, vocab, train_pairs, epochs=args.mlm_epochs, log=log)
    history = finetune_pair(model, vocab, train_pairs, val_pairs, log=log)
    save_evaluator(args.out, model)
    if args.history:
        with open(args.history, "w") as fh:
            json.dump(history, fh, indent=2, sort_keys=True)
    best = history["best_epoch"]
    print(f"best epoch {best} "
          f"(val accuracy {history['val_accuracy'][best - 1]:.4f}) -> {args.out}")
    return 0


def cmd_train_lstm(args) -> int:
    cfg = _config_from(args)
    params = PipelineParams.load(args.params)
    records = read_csv(args.data)
    train, val, _ = _split_records(records, 1.0 - args.val_fraction, cfg.seed)
    ccfg = classifier_config(cfg, len(params.selected))
    if args.mode:
        ccfg = ClassifierConfig(**{**ccfg.to_dict(),
                                   "num_classes": 2 if args.mode == "binary" else 6})
    log = print if args.verbose else None
    model, history = train_classifier(ccfg, _sequences_for(train, params),
                                      _sequences_for(val, params), log=log)
    save_classifier(args.out, model)
    if args.history:
        with open(args.history, "w") as fh:
            json.dump(history, fh, indent=2, sort_keys=True)
    best = history["best_epoch"]
    print(f"best epoch {best} "
          f"(val accuracy {history['val_accuracy'][best - 1]:.4f}) -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    model = load_generator(args.ckpt)
    vocab = load_vocab(args.vocab)
    policy = GenerationPolicy(mode=args.mode, temperature=args.temperature,
                              max_tokens=args.max_tokens, seed=args.seed)
    pred = predict_next_packet(model, vocab, args.line, policy)
    _print_json({"kind": pred.kind, "line": pred.line, "reason": pred.reason})
    return 0


def cmd_judge(args) -> int:
    model = load_evaluator(args.ckpt)
    vocab = load_vocab(args.vocab)
    _print_json(classify_pair(model, vocab, args.a, args.b))
    return 0


def cmd_classify(args) -> int:
    model = load_classifier(args.ckpt)
    params = PipelineParams.load(args.params)
    records = read_csv(getattr(args, "in"))
    seqs = _sequences_for(records, params)
    out = classify(model, seqs.x)
    doc: dict = {"count": len(seqs.x), "labels": out["labels"]}
    labeled = [y for y in seqs.y if y != "unlabeled"]
    if len(labeled) == len(seqs.y) and len(seqs.y) > 0:
        truths = [to_binary(y) if model.config.num_classes == 2 else y
                  for y in seqs.y]
        doc["metrics"] = compute_metrics(
            truths, out["labels"],
            positive_class="Attack" if model.config.num_classes == 2 else None)
    with open(args.report, "w") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"classified {doc['count']} windows -> {args.report}")
    return 0


# --- orchestrated phases ---

def cmd_dev_run(args) -> int:
    cfg = _config_from(args)
    log = print if args.verbose else None
    summary = dev_run(cfg, log=log)
    for stage, status in summary["stages"].items():
        print(f"{stage}: {status}")
    rep = summary["report"]
    print(f"config hash {summary['config_hash'][:12]}")
    print(f"generator next-line accuracy {rep['generator']['next_line_accuracy']:.4f}")
    print(f"evaluator pair accuracy     {rep['evaluator']['accuracy']:.4f}")
    print(f"classifier accuracy         {rep['classifier']['accuracy']:.4f}")
    return 0


def cmd_deploy_run(args) -> int:
    cfg = _config_from(args)
    records = read_csv(getattr(args, "in")) if getattr(args, "in") else None
    gate = None
    if args.gate == "on":
        gate = True
    elif args.gate == "off":
        gate = False
    report = deploy_run(cfg, records=records, gate=gate,
                        log=print if args.verbose else None)
    _print_json(report)
    return 0


def cmd_report(args) -> int:
    with open(getattr(args, "in")) as fh:
        doc = json.load(fh)
    rep = doc.get("classifier", doc)
    written = render_report(rep, text_path=args.text)
    if args.roc_png:
        roc = doc.get("roc")
        if not roc:
            raise ConfigError("report has no ROC block to plot")
        plot_roc(roc, args.roc_png)
        written["roc_png"] = args.roc_png
    if args.loss_png:
        history = doc.get("histories", {}).get(args.loss_model)
        if not history:
            raise ConfigError(f"report has no {args.loss_model!r} history")
        plot_losses(history, args.loss_png)
        written["loss_png"] = args.loss_png
    for kind, path in written.items():
        print(f"{kind}: {path}")
    if not written:
        print(json.dumps(rep.get("accuracy"), indent=2))
    return 0


# --- wiring ---

def _add_verbose(p) -> None:
    p.add_argument("--verbose", action="store_true",
                   help="print per-epoch progress")


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="flowcast",
        description="Train and run the packet-prediction pipeline.")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate deterministic labeled traffic")
    p.add_argument("--out", required=True)
    p.add_argument("--flows", type=int, default=360)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--profiles", help="also dump the class profile table")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("ingest", help="parse a pcap file into the packet CSV")
    p.add_argument("--pcap", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", default="unlabeled")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("features", help="fit the feature pipeline on a CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True, help="output parameter file")
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--var-threshold", type=float, default=0.25)
    p.add_argument("--corr-threshold", type=float, default=0.9)
    p.set_defaults(fn=cmd_features)

    p = sub.add_parser("tokenize", help="train the byte-pair vocabulary")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, default=512)
    p.set_defaults(fn=cmd_tokenize)

    p = sub.add_parser("train-gpt", help="train the next-packet generator")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.add_argument("--config")
    p.add_argument("--val-fraction", type=float, default=0.2)
    _add_verbose(p)
    p.set_defaults(fn=cmd_train_gpt)

    p = sub.add_parser("build-pairs", help="build the packet-pair dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--neg-ratio", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_build_pairs)

    p = sub.add_parser("train-bert", help="train the pair evaluator")
    p.add_argument("--pairs", required=True)
    p.add_argument("--val-pairs", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.add_argument("--config")
    p.add_argument("--mlm-epochs", type=int, default=0)
    _add_verbose(p)
    p.set_defaults(fn=cmd_train_bert)

    p = sub.add_parser("train-lstm", help="train the window classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("binary", "multiclass"))
    p.add_argument("--history")
    p.add_argument("--config")
    p.add_argument("--val-fraction", type=float, default=0.2)
    _add_verbose(p)
    p.set_defaults(fn=cmd_train_lstm)

    p = sub.add_parser("predict", help="predict the next packet for one line")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--line", required=True)
    p.add_argument("--mode", choices=("greedy", "temperature"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-tokens", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("judge", help="ask the evaluator about a packet pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--a", required=True, help="first packet line")
    p.add_argument("--b", required=True, help="candidate next packet line")
    p.set_defaults(fn=cmd_judge)

    p = sub.add_parser("classify", help="classify windows from a packet CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_classify)

    p = sub.add_parser("dev-run", help="run the full development phase")
    p.add_argument("--config")
    _add_verbose(p)
    p.set_defaults(fn=cmd_dev_run)

    p = sub.add_parser("deploy-run", help="run the deployment loop")
    p.add_argument("--config")
    p.add_argument("--in", help="packet CSV to process (default: fresh synthetic)")
    p.add_argument("--gate", choices=("on", "off"),
                   help="override the evaluator gate")
    _add_verbose(p)
    p.set_defaults(fn=cmd_deploy_run)

    p = sub.add_parser("report", help="render artifacts from a report JSON")
    p.add_argument("--in", required=True, help="eval_report.json path")
    p.add_argument("--text", help="write the per-class table here")
    p.add_argument("--roc-png", help="write the ROC plot here")
    p.add_argument("--loss-png", help="write a loss-curve plot here")
    p.add_argument("--loss-model", choices=("gpt", "bert", "lstm"),
                   default="lstm", help="whose losses to plot")
    p.set_defaults(fn=cmd_report)

    return top


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FlowcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
