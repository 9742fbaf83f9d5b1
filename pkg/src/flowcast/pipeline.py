"""Two-phase orchestration: develop (train everything) and deploy (predict).

The development run executes a fixed stage order

    synth -> features -> tokenize -> train-gpt -> build-pairs -> train-bert
          -> train-lstm -> evaluate

with every stage reading its inputs from files under one run directory and
recording its outputs in manifest.json. A stage is skipped on rerun when the
manifest entry carries the current config hash and all of its artifact files
still exist, so a finished run is idempotent and an interrupted one resumes.
Failures surface as StageFailure naming the stage; artifacts already written
stay on disk.

The deploy run replays the development loop on fresh traffic: each incoming
packet is serialized, the generator predicts the next packet, the pair
evaluator optionally gates the prediction (on by default; turn off to bypass
the check), and whatever survives is parsed back through the stored feature
pipeline and classified. Every input packet lands in exactly one bucket:

    predicted_flow_end | unparseable | rejected_by_evaluator
                       | predicted_normal | predicted_attack

so the bucket counts always sum to the number of input packets.

Reports are canonical JSON (sorted keys) and all randomness is seeded from
the config, which makes reruns byte-identical. Plots are never written by
the runs themselves; the `report` command renders them on demand.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bpe import BpeVocab, load_vocab, save_vocab, train_bpe
from .classifier import (
    ClassifierConfig, classify, classify_predicted, load_classifier,
    save_classifier, train_classifier,
)
from .errors import (
    ConfigError, FlowcastError, MissingCheckpoint, StageFailure,
)
from .evaluator import (
    CONSECUTIVE, EvaluatorConfig, build_pair_dataset, classify_pair,
    evaluate_pairs, finetune_pair, load_evaluator, PairEvaluatorModel,
    pretrain_mlm, read_pairs, save_evaluator, write_pairs,
)
from .features import PipelineParams, apply_pipeline, fit_pipeline, reshape_sequences
from .features import _allocate  # same package: reuse the split arithmetic
from .generator import (
    GenerationPolicy, GeneratorConfig, NextPacketModel, build_windows,
    evaluate_generator, load_generator, predict_next_packet, save_generator,
    train_generator,
)
from .ingest import read_csv, write_csv
from .manifest import to_binary
from .metrics import compute_metrics, format_report, report_json, roc_curve
from .nn import config_hash
from .synth import DEV_MIX, SynthSpec, generate, profile_table
from .textio import flow_lines

STAGES = ("synth", "features", "tokenize", "train-gpt", "build-pairs",
          "train-bert", "train-lstm", "evaluate")

ENV_DATA_ROOT = "FLOWCAST_DATA_ROOT"


@dataclass
class PipelineConfig:
    """One JSON document driving both phases.

    generator/evaluator/classifier carry per-model overrides merged over the
    desk-scale defaults below; unknown keys anywhere are rejected.
    """

    seed: int = 42
    data_root: str = "flowcast-run"
    n_flows: int = 360
    mix: dict | None = None            # None -> the synth module's dev mix
    window: int = 4
    var_threshold: float = 0.25
    corr_threshold: float = 0.9
    train_fraction: float = 0.8
    vocab_size: int = 512
    neg_ratio: float = 0.5
    mlm_epochs: int = 0
    num_classes: int = 2
    generator: dict = field(default_factory=dict)
    evaluator: dict = field(default_factory=dict)
    classifier: dict = field(default_factory=dict)
    deploy_flows: int = 40
    deploy_seed_offset: int = 1000
    gate: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.n_flows < 1 or self.deploy_flows < 1:
            raise ConfigError("n_flows and deploy_flows must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "data_root": self.data_root,
            "n_flows": self.n_flows, "mix": self.mix, "window": self.window,
            "var_threshold": self.var_threshold,
            "corr_threshold": self.corr_threshold,
            "train_fraction": self.train_fraction,
            "vocab_size": self.vocab_size, "neg_ratio": self.neg_ratio,
            "mlm_epochs": self.mlm_epochs, "num_classes": self.num_classes,
            "generator": dict(self.generator),
            "evaluator": dict(self.evaluator),
            "classifier": dict(self.classifier),
            "deploy_flows": self.deploy_flows,
            "deploy_seed_offset": self.deploy_seed_offset,
            "gate": self.gate,
        }

    @property
    def hash(self) -> str:
        # data_root identifies where artifacts live, not what experiment ran:
        # the same config in two directories is the same experiment and must
        # produce byte-identical reports, so the root stays out of the hash
        # (the FLOWCAST_DATA_ROOT override follows the same rule).
        doc = self.to_dict()
        doc.pop("data_root")
        return config_hash(doc)

    def root(self) -> Path:
        return Path(os.environ.get(ENV_DATA_ROOT) or self.data_root)


def generator_config(cfg: PipelineConfig) -> GeneratorConfig:
    base = dict(vocab_size=cfg.vocab_size, layers=2, width=64, heads=4,
                max_positions=64, dropout=0.0, lr=1e-3, batch_size=32,
                max_epochs=30, patience=3, seed=cfg.seed)
    base.update(cfg.generator)
    return GeneratorConfig(**base)


def evaluator_config(cfg: PipelineConfig) -> EvaluatorConfig:
    base = dict(vocab_size=cfg.vocab_size, layers=2, width=64, heads=4,
                max_positions=96, dropout=0.0, mlm_rate=0.15, lr=1e-3,
                batch_size=32, max_epochs=30, patience=3, seed=cfg.seed)
    base.update(cfg.evaluator)
    return EvaluatorConfig(**base)


def classifier_config(cfg: PipelineConfig, n_features: int) -> ClassifierConfig:
    base = dict(features=n_features, window=cfg.window,
                num_classes=cfg.num_classes, seed=cfg.seed)
    base.update(cfg.classifier)
    return ClassifierConfig(**base)


# --- run-directory bookkeeping ---

ARTIFACTS = {
    "synth": ("records.csv", "profiles.json"),
    "features": ("pipeline_params.json", "split.json"),
    "tokenize": ("vocab.json",),
    "train-gpt": ("gpt.ckpt", "gpt_history.json"),
    "build-pairs": ("pairs_train.csv", "pairs_val.csv"),
    "train-bert": ("bert.ckpt", "bert_history.json"),
    "train-lstm": ("lstm.ckpt", "lstm_history.json"),
    "evaluate": ("eval_report.json", "eval_report.txt", "roc.csv"),
}


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    return json.loads(path.read_text())


class RunDir:
    """Stage cache keyed on the config hash."""

    def __init__(self, root: Path, cfg_hash: str):
        self.root = Path(root)
        self.cfg_hash = cfg_hash
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = _read_json(self.manifest_path)
        else:
            self.manifest = {"stages": {}}

    def path(self, name: str) -> Path:
        return self.root / name

    def done(self, stage: str) -> bool:
        entry = self.manifest["stages"].get(stage)
        if not entry or entry.get("config_hash") != self.cfg_hash:
            return False
        return all((self.root / a).exists() for a in ARTIFACTS[stage])

    def record(self, stage: str) -> None:
        self.manifest["stages"][stage] = {
            "config_hash": self.cfg_hash,
            "artifacts": {a: _file_hash(self.root / a) for a in ARTIFACTS[stage]},
        }
        _write_json(self.manifest_path, self.manifest)


# --- shared loading helpers ---

def _split_records(records, train_fraction: float, seed: int):
    """Stratified flow-level split of raw records; flows stay whole."""
    flow_rows: dict[int, list] = {}
    flow_label: dict[int, str] = {}
    for r in records:
        flow_rows.setdefault(r.flow_index, []).append(r)
        flow_label.setdefault(r.flow_index, r.label)
    by_label: dict[str, list[int]] = {}
    for fl in sorted(flow_rows):
        by_label.setdefault(flow_label[fl], []).append(fl)
    rng = np.random.default_rng(seed)
    train_flows, val_flows = [], []
    for label in sorted(by_label):
        flows = by_label[label]
        flows = [flows[i] for i in rng.permutation(len(flows))]
        n_train, _ = _allocate(len(flows), (train_fraction, 1.0 - train_fraction))
        train_flows.extend(flows[:n_train])
        val_flows.extend(flows[n_train:])
    train = [r for fl in sorted(train_flows) for r in flow_rows[fl]]
    val = [r for fl in sorted(val_flows) for r in flow_rows[fl]]
    return train, val, {"train": sorted(train_flows), "val": sorted(val_flows)}


def _records_by_split(run: RunDir):
    records = read_csv(run.path("records.csv"))
    split = _read_json(run.path("split.json"))
    want_train, want_val = set(split["train"]), set(split["val"])
    train = [r for r in records if r.flow_index in want_train]
    val = [r for r in records if r.flow_index in want_val]
    return train, val


def _flows_of(records):
    flows: dict[int, list] = {}
    for r in records:
        flows.setdefault(r.flow_index, []).append(r)
    return [flows[fl] for fl in sorted(flows)]


def _flow_line_lists(records, params: PipelineParams) -> list[list[str]]:
    return [flow_lines(f, params.selected) for f in _flows_of(records)]


def _sequences_for(records, params: PipelineParams):
    fm = apply_pipeline(records, params)
    return reshape_sequences(fm, params.window)


# --- the development phase ---

def dev_run(cfg: PipelineConfig, log=None) -> dict:
    run = RunDir(cfg.root(), cfg.hash)
    _write_json(run.path("config.json"), {"config": cfg.to_dict(), "hash": cfg.hash})
    statuses: dict[str, str] = {}

    def stage(name: str, fn) -> None:
        if run.done(name):
            statuses[name] = "skipped"
            if log:
                log(f"{name}: skipped (cached)")
            return
        if log:
            log(f"{name}: running")
        try:
            fn()
        except StageFailure:
            raise
        except (FlowcastError, OSError, ValueError) as exc:
            raise StageFailure(name, str(exc)) from exc
        run.record(name)
        statuses[name] = "run"

    def do_synth():
        spec = SynthSpec(n_flows=cfg.n_flows, mix=cfg.mix or dict(DEV_MIX),
                         seed=cfg.seed)
        records, _ = generate(spec)
        write_csv(records, run.path("records.csv"))
        _write_json(run.path("profiles.json"), profile_table())

    def do_features():
        records = read_csv(run.path("records.csv"))
        train, _, split_doc = _split_records(records, cfg.train_fraction, cfg.seed)
        _, params = fit_pipeline(train, var_threshold=cfg.var_threshold,
                                 corr_threshold=cfg.corr_threshold,
                                 window=cfg.window)
        params.save(run.path("pipeline_params.json"))
        _write_json(run.path("split.json"), split_doc)

    def do_tokenize():
        params = PipelineParams.load(run.path("pipeline_params.json"))
        train, _ = _records_by_split(run)
        lines = [ln for f in _flow_line_lists(train, params) for ln in f]
        corpus = "\n".join(lines) + "\n"
        vocab = train_bpe(corpus, vocab_size=cfg.vocab_size)
        save_vocab(vocab, run.path("vocab.json"))

    def do_train_gpt():
        params = PipelineParams.load(run.path("pipeline_params.json"))
        vocab = load_vocab(run.path("vocab.json"))
        train, val = _records_by_split(run)
        gcfg = generator_config(cfg)
        train_w = build_windows(_flow_line_lists(train, params), vocab,
                                gcfg.max_positions)
        val_w = build_windows(_flow_line_lists(val, params), vocab,
                              gcfg.max_positions)
        model, history = train_generator(train_w, gcfg, val_w, log=log)
        save_generator(run.path("gpt.ckpt"), model)
        _write_json(run.path("gpt_history.json"), history)

    def do_build_pairs():
        params = PipelineParams.load(run.path("pipeline_params.json"))
        train, val = _records_by_split(run)
        train_pairs = build_pair_dataset(_flow_line_lists(train, params),
                                         neg_ratio=cfg.neg_ratio, seed=cfg.seed)
        val_pairs = build_pair_dataset(_flow_line_lists(val, params),
                                       neg_ratio=cfg.neg_ratio, seed=cfg.seed + 1)
        write_pairs(run.path("pairs_train.csv"), train_pairs)
        write_pairs(run.path("pairs_val.csv"), val_pairs)

    def do_train_bert():
        vocab = load_vocab(run.path("vocab.json"))
        train_pairs = read_pairs(run.path("pairs_train.csv"))
        val_pairs = read_pairs(run.path("pairs_val.csv"))
        ecfg = evaluator_config(cfg)
        model = PairEvaluatorModel(ecfg)
        mlm_losses = []
        if cfg.mlm_epochs > 0:
            mlm_losses = pretrain_mlm(model, vocab, train_pairs,
                                      epochs=cfg.mlm_epochs, log=log)
        history = finetune_pair(model, vocab, train_pairs, val_pairs, log=log)
        history["mlm_losses"] = mlm_losses
        save_evaluator(run.path("bert.ckpt"), model)
        _write_json(run.path("bert_history.json"), history)

    def do_train_lstm():
        params = PipelineParams.load(run.path("pipeline_params.json"))
        train, val = _records_by_split(run)
        ccfg = classifier_config(cfg, len(params.selected))
        model, history = train_classifier(ccfg, _sequences_for(train, params),
                                          _sequences_for(val, params), log=log)
        save_classifier(run.path("lstm.ckpt"), model)
        _write_json(run.path("lstm_history.json"), history)

    def do_evaluate():
        params = PipelineParams.load(run.path("pipeline_params.json"))
        vocab = load_vocab(run.path("vocab.json"))
        _, val = _records_by_split(run)
        gpt = load_generator(run.path("gpt.ckpt"))
        bert = load_evaluator(run.path("bert.ckpt"))
        lstm = load_classifier(run.path("lstm.ckpt"))

        gen_metrics = evaluate_generator(gpt, vocab,
                                         _flow_line_lists(val, params))
        pair_metrics = evaluate_pairs(bert, vocab,
                                      read_pairs(run.path("pairs_val.csv")))

        seqs = _sequences_for(val, params)
        out = classify(lstm, seqs.x)
        truths = [to_binary(y) if lstm.config.num_classes == 2 else y
                  for y in seqs.y]
        clf_report = compute_metrics(truths, out["labels"],
                                     positive_class="Attack"
                                     if lstm.config.num_classes == 2 else None)
        roc = None
        if lstm.config.num_classes == 2:
            roc = roc_curve(truths, out["probabilities"][:, 1].tolist())

        report = {
            "schema_version": 1,
            "config_hash": cfg.hash,
            "checkpoints": {n: _file_hash(run.path(f))
                            for n, f in (("gpt", "gpt.ckpt"),
                                         ("bert", "bert.ckpt"),
                                         ("lstm", "lstm.ckpt"))},
            "generator": gen_metrics,
            "evaluator": pair_metrics,
            "classifier": clf_report,
            "roc": roc,
            "histories": {
                "gpt": _read_json(run.path("gpt_history.json")),
                "bert": _read_json(run.path("bert_history.json")),
                "lstm": _read_json(run.path("lstm_history.json")),
            },
        }
        run.path("eval_report.json").write_text(report_json(report))
        run.path("eval_report.txt").write_text(format_report(clf_report))
        if roc is not None:
            from .metrics import roc_points_csv
            run.path("roc.csv").write_text(roc_points_csv(roc))
        else:
            run.path("roc.csv").write_text("threshold,fpr,tpr\n")

    for name, fn in (("synth", do_synth), ("features", do_features),
                     ("tokenize", do_tokenize), ("train-gpt", do_train_gpt),
                     ("build-pairs", do_build_pairs),
                     ("train-bert", do_train_bert),
                     ("train-lstm", do_train_lstm), ("evaluate", do_evaluate)):
        stage(name, fn)

    return {
        "config_hash": cfg.hash,
        "stages": statuses,
        "report": _read_json(run.path("eval_report.json")),
    }


# --- the deployment phase ---

def _load_deploy_artifacts(run: RunDir):
    needed = {"pipeline_params.json": "features", "vocab.json": "tokenize",
              "gpt.ckpt": "train-gpt", "bert.ckpt": "train-bert",
              "lstm.ckpt": "train-lstm"}
    for name, stage in needed.items():
        if not run.path(name).exists():
            raise MissingCheckpoint(
                f"{name} not found under {run.root}; run dev-run (stage {stage}) first")
    params = PipelineParams.load(run.path("pipeline_params.json"))
    vocab = load_vocab(run.path("vocab.json"))
    gpt = load_generator(run.path("gpt.ckpt"))
    bert = load_evaluator(run.path("bert.ckpt"))
    lstm = load_classifier(run.path("lstm.ckpt"))
    return params, vocab, gpt, bert, lstm


def deploy_run(cfg: PipelineConfig, records=None, gate: bool | None = None,
               log=None) -> dict:
    """Process a packet stream through predict -> gate -> parse -> classify.

    records defaults to a fresh synthetic stream drawn with the deploy seed.
    Returns the report dict; also writes deploy_report.json under the run
    root. Every input packet is counted in exactly one bucket.
    """
    run = RunDir(cfg.root(), cfg.hash)
    params, vocab, gpt, bert, lstm = _load_deploy_artifacts(run)
    if gate is None:
        gate = cfg.gate
    if records is None:
        spec = SynthSpec(n_flows=cfg.deploy_flows, mix=cfg.mix or dict(DEV_MIX),
                         seed=cfg.seed + cfg.deploy_seed_offset)
        records, _ = generate(spec)

    policy = GenerationPolicy(mode="greedy", max_tokens=gpt.config.max_positions)
    counts = {"predicted_flow_end": 0, "unparseable": 0,
              "rejected_by_evaluator": 0, "predicted_normal": 0,
              "predicted_attack": 0}
    by_class: dict[str, int] = {}
    n_inputs = 0

    for flow in _flows_of(records):
        lines = flow_lines(flow, params.selected)
        scaled = apply_pipeline(flow, params).data
        for i, line in enumerate(lines):
            n_inputs += 1
            pred = predict_next_packet(gpt, vocab, line, policy)
            if pred.kind == "flow_end":
                counts["predicted_flow_end"] += 1
                continue
            if pred.kind == "rejected":
                counts["unparseable"] += 1
                continue
            if gate:
                verdict = classify_pair(bert, vocab, line, pred.line)
                if verdict["label"] != CONSECUTIVE:
                    counts["rejected_by_evaluator"] += 1
                    continue
            out = classify_predicted(lstm, params, [pred.line],
                                     histories=[scaled[:i + 1]])
            v = out["verdicts"][0]
            if v.status == "rejected":
                counts["unparseable"] += 1
                continue
            if v.label == "Normal":
                counts["predicted_normal"] += 1
            else:
                counts["predicted_attack"] += 1
                by_class[v.label] = by_class.get(v.label, 0) + 1
        if log:
            log(f"flow done ({n_inputs} packets so far)")

    report = {
        "schema_version": 1,
        "config_hash": cfg.hash,
        "checkpoints": {n: _file_hash(run.path(f))
                        for n, f in (("gpt", "gpt.ckpt"), ("bert", "bert.ckpt"),
                                     ("lstm", "lstm.ckpt"))},
        "gate": gate,
        "inputs": n_inputs,
        "counts": counts,
        "attack_by_class": dict(sorted(by_class.items())),
    }
    assert sum(counts.values()) == n_inputs
    run.path("deploy_report.json").write_text(report_json(report))
    return report
