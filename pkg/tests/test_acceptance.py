"""Release gate: nine checks covering the numeric core, the data plumbing,
and desk-scale end-to-end behavior.

Each test prints a single "ACCEPTANCE n (...): PASS/FAIL" verdict; conftest
replays the collected lines after the run summary so they appear even with
output capture on. Checks 5-8 train real models; the whole module takes
roughly 15 minutes on one CPU core. Run it alone with:

    pytest tests/test_acceptance.py -v
"""
import json
import math
import time
from types import SimpleNamespace

import conftest
import numpy as np
import pytest

from flowcast.bpe import decode, decode_bytes, encode, train_bpe
from flowcast.classifier import ClassifierConfig, classify, train_classifier
from flowcast.evaluator import (
    EvaluatorConfig, PairEvaluatorModel, build_pair_dataset, evaluate_pairs,
    finetune_pair,
)
from flowcast.features import (
    FeatureMatrix, apply_pipeline, fit_pipeline, minmax_scale,
    reshape_sequences, select_features,
)
from flowcast.generator import (
    GeneratorConfig, build_windows, evaluate_generator, train_generator,
)
from flowcast.manifest import to_binary
from flowcast.metrics import compute_metrics, roc_curve
from flowcast.nn import (
    EarlyStopper, LstmParams, Tensor, TransformerBlock, attention,
    cross_entropy, grad_check, lstm_cell,
)
from flowcast.pipeline import PipelineConfig, deploy_run, dev_run
from flowcast.synth import SynthSpec, generate
from flowcast.textio import flow_lines


def _verdict(num: int, label: str, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {num} ({label}): {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, flush=True)
    conftest.ACCEPTANCE_VERDICTS.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def corpus():
    """360 deterministic flows split 4:1 by flow, plus fitted plumbing.

    Shared by checks 3 and 5-7; every model below trains on the train side
    and is scored on flows it never saw.
    """
    records, oracle = generate(SynthSpec(n_flows=360, seed=42))
    flows: dict[int, list] = {}
    for r in records:
        flows.setdefault(r.flow_index, []).append(r)
    keys = sorted(flows)
    val_keys = set(keys[::5])
    train_records = [r for k in keys if k not in val_keys for r in flows[k]]
    val_records = [r for k in keys if k in val_keys for r in flows[k]]
    _, params = fit_pipeline(train_records, window=4)
    train_lines = [flow_lines(flows[k], params.selected)
                   for k in keys if k not in val_keys]
    val_lines = [flow_lines(flows[k], params.selected)
                 for k in keys if k in val_keys]
    text = "\n".join(ln for f in train_lines for ln in f) + "\n"
    vocab = train_bpe(text, vocab_size=512)
    return SimpleNamespace(
        oracle=oracle, params=params, vocab=vocab, train_text=text,
        train_records=train_records, val_records=val_records,
        train_lines=train_lines, val_lines=val_lines)


# --- 1: gradient checking ---

def test_1_numeric_core():
    rng = np.random.default_rng(0)
    t0 = time.monotonic()

    q, k, v = (Tensor(rng.normal(size=(3, 4)), requires_grad=True)
               for _ in range(3))
    w = Tensor(rng.normal(size=(4, 5)) * 0.5, requires_grad=True)
    y_att = rng.integers(0, 5, size=3)

    def f_attention():
        return cross_entropy(attention(q, k, v, causal=True) @ w, y_att)

    err_a = grad_check(f_attention, [q, k, v, w])

    cell = LstmParams(3, 4, rng)
    head = Tensor(rng.normal(size=(4, 3)) * 0.5, requires_grad=True)
    x_seq = rng.normal(size=(2, 3, 3))
    y_lstm = rng.integers(0, 3, size=2)

    def f_lstm():
        h, c = Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4)))
        for t in range(3):
            h, c = lstm_cell(Tensor(x_seq[:, t, :]), h, c, cell)
        return cross_entropy(h @ head, y_lstm)

    lstm_params = cell.params("cell")
    lstm_params["head"] = head
    err_b = grad_check(f_lstm, lstm_params)

    blocks = [TransformerBlock(8, 2, rng, causal=True) for _ in range(2)]
    out = Tensor(rng.normal(size=(8, 6)) * 0.5, requires_grad=True)
    x0 = rng.normal(size=(4, 8))
    y_stack = rng.integers(0, 6, size=4)

    def f_stack():
        h = Tensor(x0)
        for b in blocks:
            h = b(h)
        return cross_entropy(h @ out, y_stack)

    stack_params = {**blocks[0].params("b0"), **blocks[1].params("b1")}
    stack_params["head"] = out
    err_c = grad_check(f_stack, stack_params)

    secs = time.monotonic() - t0
    worst = max(err_a, err_b, err_c)
    _verdict(1, "numeric core", worst < 1e-5 and secs < 10.0,
             f"worst relative error {worst:.2e} "
             f"(attention {err_a:.1e}, lstm {err_b:.1e}, stack {err_c:.1e}) "
             f"in {secs:.1f}s")


# --- 2: exact oracles ---

def _attention_oracle(q, k, v, causal):
    tq, dk = q.shape
    tk, dv = k.shape[0], v.shape[1]
    out = np.zeros((tq, dv))
    for i in range(tq):
        limit = min(i + 1, tk) if causal else tk
        scores = [sum(q[i, d] * k[j, d] for d in range(dk)) / math.sqrt(dk)
                  for j in range(limit)]
        m = max(scores)
        weights = [math.exp(s - m) for s in scores]
        z = sum(weights)
        for j in range(limit):
            for d in range(dv):
                out[i, d] += (weights[j] / z) * v[j, d]
    return out


def _lstm_oracle(x, h, c, p):
    def sig(z):
        return 1.0 / (1.0 + math.exp(-z))

    n, hid = h.shape
    h_out, c_out = np.zeros_like(h), np.zeros_like(c)
    for b in range(n):
        for j in range(hid):
            gates = {}
            for g in ("i", "f", "o", "g"):
                z = getattr(p, f"b_{g}").data[j]
                z += sum(x[b, d] * getattr(p, f"w_{g}").data[d, j]
                         for d in range(x.shape[1]))
                z += sum(h[b, d] * getattr(p, f"u_{g}").data[d, j]
                         for d in range(hid))
                gates[g] = math.tanh(z) if g == "g" else sig(z)
            c_out[b, j] = gates["f"] * c[b, j] + gates["i"] * gates["g"]
            h_out[b, j] = gates["o"] * math.tanh(c_out[b, j])
    return h_out, c_out


def _metrics_oracle(true, pred):
    classes = sorted(set(true) | set(pred))
    per = {}
    for c in classes:
        tp = sum(t == c and p == c for t, p in zip(true, pred))
        fp = sum(t != c and p == c for t, p in zip(true, pred))
        fn = sum(t == c and p != c for t, p in zip(true, pred))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per[c] = (prec, rec, f1, tp + fn)
    acc = sum(t == p for t, p in zip(true, pred)) / len(true)
    macro = tuple(sum(per[c][i] for c in classes) / len(classes)
                  for i in range(3))
    weighted = tuple(sum(per[c][i] * per[c][3] for c in classes) / len(true)
                     for i in range(3))
    return per, acc, macro, weighted


def _pair_count_auc(pos, neg):
    wins = int((pos[:, None] > neg[None, :]).sum())
    ties = int((pos[:, None] == neg[None, :]).sum())
    return (2 * wins + ties) / (2 * len(pos) * len(neg))


def test_2_exact_oracles():
    rng = np.random.default_rng(1)
    worst = 0.0

    for trial in range(120):
        tq, dk, dv = rng.integers(1, 5, size=3)
        q = rng.normal(size=(tq, dk))
        k = rng.normal(size=(tq, dk))
        v = rng.normal(size=(tq, dv))
        got = attention(Tensor(q), Tensor(k), Tensor(v),
                        causal=bool(trial % 2)).data
        want = _attention_oracle(q, k, v, causal=bool(trial % 2))
        worst = max(worst, float(np.abs(got - want).max()))

    for trial in range(120):
        n, d, hid = rng.integers(1, 5, size=3)
        p = LstmParams(int(d), int(hid), rng)
        x = rng.normal(size=(n, d))
        h0, c0 = rng.normal(size=(n, hid)), rng.normal(size=(n, hid))
        h1, c1 = lstm_cell(Tensor(x), Tensor(h0), Tensor(c0), p)
        hw, cw = _lstm_oracle(x, h0, c0, p)
        worst = max(worst, float(np.abs(h1.data - hw).max()),
                    float(np.abs(c1.data - cw).max()))

    pool = ["Normal", "DDoS", "XSS", "Attack"]
    for trial in range(120):
        n = int(rng.integers(4, 60))
        true = [pool[i] for i in rng.integers(0, len(pool), size=n)]
        pred = [pool[i] for i in rng.integers(0, len(pool), size=n)]
        rep = compute_metrics(true, pred)
        per, acc, macro, weighted = _metrics_oracle(true, pred)
        worst = max(worst, abs(rep["accuracy"] - acc))
        for c, (prec, rec, f1, support) in per.items():
            row = rep["per_class"][c]
            worst = max(worst, abs(row["precision"] - prec),
                        abs(row["recall"] - rec), abs(row["f1"] - f1),
                        abs(row["support"] - support))
        for keys, vals in (("macro", macro), ("weighted", weighted)):
            for key, val in zip(("precision", "recall", "f1"), vals):
                worst = max(worst, abs(rep[keys][key] - val))

    auc_exact = True
    auc_cases = 0
    for trial in range(110):
        n = int(rng.integers(600, 1001)) if trial < 10 \
            else int(rng.integers(2, 80))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        distinct = int(rng.integers(1, 12))
        scores = rng.integers(0, distinct, size=n) / max(distinct - 1, 1)
        names = ["Attack" if b else "Normal" for b in labels]
        got = roc_curve(names, scores.tolist())["auc"]
        want = _pair_count_auc(scores[labels == 1], scores[labels == 0])
        auc_exact = auc_exact and got == want
        auc_cases += 1

    _verdict(2, "exact oracles",
             worst <= 1e-12 and auc_exact,
             f"worst deviation {worst:.2e} over 120 instances per op; "
             f"AUC identical to pair counting on {auc_cases}/110 draws")


# --- 3: tokenizer round trip ---

def test_3_tokenizer(corpus):
    rng = np.random.default_rng(2)
    byte_fails = 0
    for _ in range(10_000):
        raw = rng.integers(0, 256, size=int(rng.integers(0, 48)),
                           dtype=np.uint8).tobytes()
        if decode_bytes(encode(raw, corpus.vocab), corpus.vocab) != raw:
            byte_fails += 1

    all_lines = [ln for flow in corpus.train_lines + corpus.val_lines
                 for ln in flow]
    line_fails = sum(decode(encode(ln, corpus.vocab), corpus.vocab) != ln
                     for ln in all_lines)
    corpus_ok = decode(encode(corpus.train_text, corpus.vocab),
                       corpus.vocab) == corpus.train_text

    again = train_bpe(corpus.train_text, vocab_size=512)
    deterministic = (again.merges == corpus.vocab.merges
                     and again.vocab_size == corpus.vocab.vocab_size)

    ok = byte_fails == 0 and line_fails == 0 and corpus_ok and deterministic
    _verdict(3, "tokenizer",
             ok,
             f"{byte_fails}/10000 byte-string failures, "
             f"{line_fails}/{len(all_lines)} corpus-line failures, "
             f"merges deterministic: {deterministic}")


# --- 4: feature pipeline ---

def test_4_feature_pipeline():
    rng = np.random.default_rng(7)
    n = 200
    keep = rng.uniform(0.0, 1.0, size=(n, 26))
    data = np.concatenate(
        [keep, keep[:, :15].copy(), np.tile(np.linspace(1.0, 30.0, 30), (n, 1))],
        axis=1)
    cols = [f"k{i:02d}" for i in range(26)] + [f"d{i:02d}" for i in range(15)] \
        + [f"c{i:02d}" for i in range(30)]
    fm = FeatureMatrix(columns=cols, data=data, flow_index=np.arange(n),
                       labels=np.array(["Normal"] * n))
    picked = select_features(fm, var_threshold=0.25, corr_threshold=0.9)

    train = picked.take_rows(np.arange(150))
    held = picked.take_rows(np.arange(150, n))
    held.data = held.data * 3.0
    fitted = minmax_scale(train)
    replayed = minmax_scale(held, params=fitted.scaler_params)

    in_unit = (fitted.data.min() >= 0.0 and fitted.data.max() <= 1.0
               and replayed.data.min() >= 0.0 and replayed.data.max() <= 1.0)
    # the fitted extrema must come from the training rows alone
    no_leak = all(
        fitted.scaler_params[c] == (float(train.data[:, j].min()),
                                    float(train.data[:, j].max()))
        for j, c in enumerate(train.columns))
    # the held-out rows were tripled, so a leaky fit would have moved the max
    no_leak = no_leak and any(
        held.data[:, j].max() > fitted.scaler_params[c][1]
        for j, c in enumerate(train.columns))

    ok = len(picked.columns) == 26 and in_unit and no_leak
    _verdict(4, "feature pipeline", ok,
             f"71 columns -> {len(picked.columns)} selected; "
             f"outputs in [0,1]: {in_unit}; train-only statistics: {no_leak}")


# --- 5: next-packet generator ---

def test_5_generator(corpus):
    cols = corpus.params.selected
    oracle_consistent = all(
        flow[i + 1] == corpus.oracle.next_line(flow[i], cols)
        for flow in corpus.val_lines[:10] for i in range(len(flow) - 1))

    config = GeneratorConfig(vocab_size=512, layers=2, width=64, heads=4,
                             max_positions=64, dropout=0.0, lr=1e-3,
                             batch_size=32, max_epochs=30, patience=3, seed=42)
    train_w = build_windows(corpus.train_lines, corpus.vocab, 64)
    val_w = build_windows(corpus.val_lines, corpus.vocab, 64)
    t0 = time.monotonic()
    model, history = train_generator(train_w, config, val_w)
    secs = time.monotonic() - t0

    scored = evaluate_generator(model, corpus.vocab, corpus.val_lines)
    acc = scored["next_line_accuracy"]
    ok = oracle_consistent and acc >= 0.90 and secs <= 600.0
    _verdict(5, "generator", ok,
             f"held-out next-line accuracy {acc:.4f} over {scored['lines']} "
             f"packets after {secs:.0f}s / {history['epochs']} epochs")


# --- 6: pair evaluator ---

def test_6_pair_evaluator(corpus):
    config = EvaluatorConfig(vocab_size=512, layers=2, width=64, heads=4,
                             max_positions=96, dropout=0.0, mlm_rate=0.15,
                             lr=1e-3, batch_size=32, max_epochs=30,
                             patience=3, seed=42)
    train_pairs = build_pair_dataset(corpus.train_lines, neg_ratio=0.5, seed=42)
    val_pairs = build_pair_dataset(corpus.val_lines, neg_ratio=0.5, seed=43)
    model = PairEvaluatorModel(config)
    t0 = time.monotonic()
    history = finetune_pair(model, corpus.vocab, train_pairs, val_pairs)
    secs = time.monotonic() - t0

    scored = evaluate_pairs(model, corpus.vocab, val_pairs)
    acc = scored["accuracy"]
    ok = acc >= 0.95 and secs <= 600.0
    _verdict(6, "pair evaluator", ok,
             f"held-out pair accuracy {acc:.4f} over {scored['count']} pairs "
             f"after {secs:.0f}s / {history['epochs']} epochs")


# --- 7: attack classifier ---

def test_7_classifier(corpus):
    config = ClassifierConfig(features=len(corpus.params.selected), window=4,
                              num_classes=2, seed=42)
    assert (config.hidden, config.dropout, config.patience,
            config.max_epochs) == (64, 0.2, 3, 80)

    train_seq = reshape_sequences(
        apply_pipeline(corpus.train_records, corpus.params), 4)
    val_seq = reshape_sequences(
        apply_pipeline(corpus.val_records, corpus.params), 4)
    model, history = train_classifier(config, train_seq, val_seq)

    out = classify(model, val_seq.x)
    truths = [to_binary(y) for y in val_seq.y]
    rep = compute_metrics(truths, out["labels"], positive_class="Attack")
    f1s = {c: rep["per_class"][c]["f1"] for c in rep["per_class"]}
    ok = (rep["accuracy"] >= 0.95 and all(v >= 0.90 for v in f1s.values())
          and history["epochs"] <= 80)
    _verdict(7, "classifier", ok,
             f"binary accuracy {rep['accuracy']:.4f}, per-class F1 "
             + ", ".join(f"{c} {v:.4f}" for c, v in sorted(f1s.items()))
             + f" after {history['epochs']} epochs")


# --- 8: end to end ---

def test_8_end_to_end(tmp_path_factory):
    root_a = tmp_path_factory.mktemp("e2e_a")
    cfg_a = PipelineConfig(seed=42, data_root=str(root_a))
    t0 = time.monotonic()
    dev_run(cfg_a)
    report_a = deploy_run(cfg_a)
    total = time.monotonic() - t0

    conserved = sum(report_a["counts"].values()) == report_a["inputs"]

    eval_bytes = (root_a / "eval_report.json").read_bytes()
    deploy_bytes = (root_a / "deploy_report.json").read_bytes()
    rerun = dev_run(cfg_a)
    deploy_run(cfg_a)
    cached_same = (set(rerun["stages"].values()) == {"skipped"}
                   and (root_a / "eval_report.json").read_bytes() == eval_bytes
                   and (root_a / "deploy_report.json").read_bytes() == deploy_bytes)

    root_b = tmp_path_factory.mktemp("e2e_b")
    cfg_b = PipelineConfig(seed=42, data_root=str(root_b))
    dev_run(cfg_b)
    deploy_run(cfg_b)
    fresh_same = (
        (root_b / "eval_report.json").read_bytes() == eval_bytes
        and (root_b / "deploy_report.json").read_bytes() == deploy_bytes)

    ok = total <= 1800.0 and conserved and cached_same and fresh_same
    counts = json.loads(deploy_bytes)["counts"]
    _verdict(8, "end to end", ok,
             f"dev+deploy in {total:.0f}s; counts {counts} sum to "
             f"{report_a['inputs']} inputs; cached rerun byte-identical: "
             f"{cached_same}; fresh directory byte-identical: {fresh_same}")


# --- 9: early stopping ---

def test_9_early_stopping():
    outcomes = []
    for patience in (1, 3, 5):
        w = Tensor(np.array([0.0]), requires_grad=True)
        stopper = EarlyStopper({"w": w}, patience)
        halted_at = None
        for epoch in range(1, 30):
            w.data[...] = float(epoch)
            if stopper.update(epoch, float(epoch)):  # worsens every epoch
                halted_at = epoch
                break
        stopper.restore_best()
        outcomes.append(halted_at == patience + 1
                        and stopper.best_epoch == 1
                        and float(w.data[0]) == 1.0)
    _verdict(9, "early stopping", all(outcomes),
             "patience 1/3/5 halted after epochs 2/4/6 and restored the "
             f"epoch-1 weights: {outcomes}")
