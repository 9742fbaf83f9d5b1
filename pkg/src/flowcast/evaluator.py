"""Packet-pair evaluator: does packet B plausibly follow packet A?

A bidirectional transformer reads [CLS] A [SEP] B [SEP] with segment
embeddings and classifies the pair. Label 0 means consecutive, label 1
means non-consecutive; ties resolve to 1, so an uncertain verdict rejects.
The deployment loop uses this as the gate on generated packets: the
detection target is the *bad* pair, which is why the non-consecutive side
carries the positive label.

Also provides a masked-token objective for optional warm-up before the
pair fine-tune; the warm-up is off unless asked for.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from .bpe import (
    CLS_ID, MASK_ID, NUM_SPECIALS, SEP_ID, BpeVocab, encode,
)
from .errors import (
    ConfigError, InsufficientFlows, NothingToMask, SequenceTooLong,
)
from .nn import (
    Adam, EarlyStopper, LayerNorm, Tensor, TransformerBlock, cross_entropy,
    glorot, load_checkpoint, save_checkpoint, softmax, zeros,
)

CONSECUTIVE = 0
NON_CONSECUTIVE = 1


@dataclass(frozen=True)
class EvaluatorConfig:
    vocab_size: int = 1024
    layers: int = 4
    width: int = 128
    heads: int = 4
    max_positions: int = 256
    dropout: float = 0.1
    mlm_rate: float = 0.15
    lr: float = 3e-4
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class PairEvaluatorModel:
    def __init__(self, config: EvaluatorConfig):
        if config.width % config.heads:
            raise ConfigError("width must be divisible by heads")
        self.config = config
        rng = np.random.default_rng(config.seed)
        w = config.width
        self.w_e = glorot(rng, config.vocab_size, w)
        self.w_p = glorot(rng, config.max_positions, w)
        self.w_s = glorot(rng, 2, w)
        self.blocks = [
            TransformerBlock(w, config.heads, rng, causal=False,
                             drop_rate=config.dropout)
            for _ in range(config.layers)
        ]
        self.ln_f = LayerNorm(w)
        self.w_mlm = glorot(rng, w, config.vocab_size)
        self.b_mlm = zeros(config.vocab_size)
        self.w_cls = glorot(rng, w, 2)
        self.b_cls = zeros(2)

    def params(self) -> dict[str, Tensor]:
        out = {"w_e": self.w_e, "w_p": self.w_p, "w_s": self.w_s,
               "w_mlm": self.w_mlm, "b_mlm": self.b_mlm,
               "w_cls": self.w_cls, "b_cls": self.b_cls}
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"blocks.{i}"))
        out.update(self.ln_f.params("ln_f"))
        return out

    def load_params(self, params: dict[str, Tensor]) -> None:
        own = self.params()
        if set(own) != set(params):
            raise ConfigError("parameter names do not match this architecture")
        for name, p in own.items():
            if p.data.shape != params[name].data.shape:
                raise ConfigError(f"shape mismatch for {name}")
            p.data[...] = params[name].data

    def encode_pair(self, a_ids: list[int], b_ids: list[int]
                    ) -> tuple[np.ndarray, np.ndarray]:
        ids = [CLS_ID] + list(a_ids) + [SEP_ID] + list(b_ids) + [SEP_ID]
        if len(ids) > self.config.max_positions:
            raise SequenceTooLong(
                f"pair of {len(ids)} tokens exceeds {self.config.max_positions}")
        segments = [0] * (len(a_ids) + 2) + [1] * (len(b_ids) + 1)
        return np.asarray(ids, dtype=np.int64), np.asarray(segments, dtype=np.int64)

    def forward(self, ids: np.ndarray, segments: np.ndarray,
                train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        ids = np.atleast_2d(np.asarray(ids))
        segments = np.atleast_2d(np.asarray(segments))
        if ids.shape != segments.shape:
            raise ConfigError("ids and segments must be the same shape")
        if ids.shape[1] > self.config.max_positions:
            raise SequenceTooLong(
                f"{ids.shape[1]} tokens exceed {self.config.max_positions} positions")
        h = (self.w_e.take_rows(ids) + self.w_p[:ids.shape[1]]
             + self.w_s.take_rows(segments))
        for block in self.blocks:
            h = block(h, train=train, rng=rng)
        return self.ln_f(h)

    def pair_logits(self, ids, segments, train: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
        h = self.forward(ids, segments, train=train, rng=rng)
        return h[:, 0, :] @ self.w_cls + self.b_cls

    def pair_loss(self, ids, segments, labels, train: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
        return cross_entropy(self.pair_logits(ids, segments, train, rng),
                             np.asarray(labels))

    def mlm_loss(self, ids: np.ndarray, segments: np.ndarray,
                 rng: np.random.Generator, train: bool = True) -> Tensor:
        """Mask ceil(rate * eligible) ordinary tokens per sequence and
        score recovery of the originals. Marker tokens are never masked."""
        ids = np.atleast_2d(np.asarray(ids)).copy()
        segments = np.atleast_2d(np.asarray(segments))
        mask = np.zeros(ids.shape, dtype=bool)
        for row in range(ids.shape[0]):
            eligible = np.flatnonzero(ids[row] >= NUM_SPECIALS)
            if eligible.size == 0:
                raise NothingToMask(f"sequence {row} has no maskable tokens")
            k = math.ceil(self.config.mlm_rate * eligible.size)
            chosen = rng.choice(eligible, size=k, replace=False)
            mask[row, chosen] = True
        originals = ids[mask]
        ids[mask] = MASK_ID
        h = self.forward(ids, segments, train=train, rng=rng)
        logits = h @ self.w_mlm + self.b_mlm
        flat = logits.reshape(ids.shape[0] * ids.shape[1], self.config.vocab_size)
        keep = mask.reshape(-1)
        targets = np.zeros(keep.shape, dtype=np.int64)
        targets[keep] = originals
        return cross_entropy(flat, targets, ignore_mask=~keep)


@dataclass(frozen=True)
class PairExample:
    text_a: str
    text_b: str
    label: int            # 0 consecutive, 1 non-consecutive
    kind: str             # "adjacent", "same_flow_gap", "cross_flow"


def build_pair_dataset(flow_lines_list: list[list[str]], neg_ratio: float = 0.5,
                       seed: int = 0) -> list[PairExample]:
    """Adjacent pairs plus sampled non-consecutive pairs.

    neg_ratio is the fraction of the final dataset that is non-consecutive.
    Negatives split evenly between same-flow pairs with a gap of at least
    two and cross-flow pairs; any sampled negative whose text matches a
    true adjacent pair is resampled, so labels are never contradictory.
    """
    if not 0 <= neg_ratio < 1:
        raise ConfigError("neg_ratio must be in [0, 1)")
    positives = []
    for lines in flow_lines_list:
        for i in range(len(lines) - 1):
            positives.append(PairExample(lines[i], lines[i + 1],
                                         CONSECUTIVE, "adjacent"))
    if not positives:
        raise InsufficientFlows("no adjacent pairs available")
    positive_texts = {(p.text_a, p.text_b) for p in positives}

    n_neg = round(len(positives) * neg_ratio / (1.0 - neg_ratio))
    if n_neg == 0:
        return positives

    rng = np.random.default_rng(seed)
    gap_flows = [f for f in flow_lines_list if len(f) >= 3]
    n_same = n_neg // 2
    n_cross = n_neg - n_same
    if n_same and not gap_flows:
        raise InsufficientFlows("no flow long enough for gapped pairs")
    if n_cross and len(flow_lines_list) < 2:
        raise InsufficientFlows("cross-flow pairs need at least two flows")

    negatives = []
    for kind, count in (("same_flow_gap", n_same), ("cross_flow", n_cross)):
        made = 0
        attempts = 0
        while made < count:
            attempts += 1
            if attempts > 100 * count + 100:
                raise InsufficientFlows(
                    f"could not sample enough {kind} pairs without label noise")
            if kind == "same_flow_gap":
                lines = gap_flows[rng.integers(len(gap_flows))]
                i = int(rng.integers(0, len(lines) - 2))
                j = int(rng.integers(i + 2, len(lines)))
                a, b = lines[i], lines[j]
            else:
                fi, gi = rng.choice(len(flow_lines_list), size=2, replace=False)
                fa, fb = flow_lines_list[fi], flow_lines_list[gi]
                a = fa[int(rng.integers(len(fa)))]
                b = fb[int(rng.integers(len(fb)))]
            if (a, b) in positive_texts:
                continue
            negatives.append(PairExample(a, b, NON_CONSECUTIVE, kind))
            made += 1

    pairs = positives + negatives
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def write_pairs(path, pairs: list[PairExample]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "kind", "text_a", "text_b"])
        for p in pairs:
            writer.writerow([p.label, p.kind, p.text_a, p.text_b])


def read_pairs(path) -> list[PairExample]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["label", "kind", "text_a", "text_b"]:
            raise ConfigError(f"{path}: unexpected pair file header {header}")
        return [PairExample(row[2], row[3], int(row[0]), row[1])
                for row in reader]


def _encode_pairs(model: PairEvaluatorModel, vocab: BpeVocab,
                  pairs: list[PairExample]):
    encoded = []
    for p in pairs:
        ids, segs = model.encode_pair(encode(p.text_a + "\n", vocab).ids,
                                      encode(p.text_b + "\n", vocab).ids)
        encoded.append((ids, segs, p.label))
    return encoded


def _length_batches(encoded, batch_size: int, rng=None):
    """Group same-length sequences so batches need no padding."""
    groups: dict[int, list[int]] = {}
    for idx, (ids, _, _) in enumerate(encoded):
        groups.setdefault(len(ids), []).append(idx)
    batches = []
    for length in sorted(groups):
        members = groups[length]
        if rng is not None:
            rng.shuffle(members)
        for start in range(0, len(members), batch_size):
            chunk = members[start:start + batch_size]
            batches.append((
                np.stack([encoded[i][0] for i in chunk]),
                np.stack([encoded[i][1] for i in chunk]),
                np.asarray([encoded[i][2] for i in chunk], dtype=np.int64),
            ))
    if rng is not None:
        rng.shuffle(batches)
    return batches


def _pair_eval(model, encoded, batch_size: int) -> tuple[float, float]:
    """(mean loss, accuracy) without dropout."""
    total, correct, n = 0.0, 0, 0
    for ids, segs, labels in _length_batches(encoded, batch_size):
        logits = model.pair_logits(ids, segs)
        total += cross_entropy(logits, labels).item() * len(labels)
        probs = softmax(logits).data
        pred = np.where(probs[:, NON_CONSECUTIVE] >= probs[:, CONSECUTIVE],
                        NON_CONSECUTIVE, CONSECUTIVE)
        correct += int((pred == labels).sum())
        n += len(labels)
    return total / max(n, 1), correct / max(n, 1)


def pretrain_mlm(model: PairEvaluatorModel, vocab: BpeVocab,
                 pairs: list[PairExample], epochs: int, log=None) -> list[float]:
    """Optional masked-token warm-up on the pair sequences."""
    encoded = _encode_pairs(model, vocab, pairs)
    params = model.params()
    opt = Adam(params, lr=model.config.lr)
    rng = np.random.default_rng(model.config.seed + 2)
    losses = []
    for epoch in range(1, epochs + 1):
        batch_losses = []
        for ids, segs, _ in _length_batches(encoded, model.config.batch_size, rng):
            opt.zero_grad()
            loss = model.mlm_loss(ids, segs, rng)
            loss.backward()
            opt.step()
            batch_losses.append(loss.item())
        losses.append(float(np.mean(batch_losses)))
        if log:
            log(f"mlm epoch {epoch}: {losses[-1]:.4f}")
    return losses


def finetune_pair(model: PairEvaluatorModel, vocab: BpeVocab,
                  train_pairs: list[PairExample],
                  val_pairs: list[PairExample] | None = None,
                  log=None) -> dict:
    if not train_pairs:
        raise ConfigError("no training pairs")
    config = model.config
    train_enc = _encode_pairs(model, vocab, train_pairs)
    val_enc = _encode_pairs(model, vocab, val_pairs) if val_pairs else train_enc
    params = model.params()
    opt = Adam(params, lr=config.lr)
    stopper = EarlyStopper(params, config.patience)
    rng = np.random.default_rng(config.seed + 3)
    history = {"train_loss": [], "val_loss": [], "val_accuracy": [],
               "epochs": 0, "best_epoch": -1}
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.monotonic()
        for ids, segs, labels in _length_batches(train_enc, config.batch_size, rng):
            opt.zero_grad()
            loss = model.pair_loss(ids, segs, labels, train=True, rng=rng)
            loss.backward()
            opt.step()
        train_loss, _ = _pair_eval(model, train_enc, config.batch_size)
        val_loss, val_acc = _pair_eval(model, val_enc, config.batch_size)
        history["train_loss"].append(train_loss)
        history["val_loss"].append(val_loss)
        history["val_accuracy"].append(val_acc)
        history["epochs"] = epoch
        if log:
            log(f"epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f} "
                f"acc {val_acc:.4f} ({time.monotonic() - t0:.1f}s)")
        if stopper.update(epoch, val_loss):
            break
    stopper.restore_best()
    history["best_epoch"] = stopper.best_epoch
    history["best_val_loss"] = stopper.best_loss
    return history


def classify_pair(model: PairEvaluatorModel, vocab: BpeVocab,
                  text_a: str, text_b: str) -> dict:
    """Probabilities and verdict for one pair; the tie goes to rejection."""
    ids, segs = model.encode_pair(encode(text_a + "\n", vocab).ids,
                                  encode(text_b + "\n", vocab).ids)
    probs = softmax(model.pair_logits(ids, segs)).data[0]
    label = (NON_CONSECUTIVE
             if probs[NON_CONSECUTIVE] >= probs[CONSECUTIVE]
             else CONSECUTIVE)
    return {
        "label": label,
        "consecutive": label == CONSECUTIVE,
        "p_consecutive": float(probs[CONSECUTIVE]),
        "p_non_consecutive": float(probs[NON_CONSECUTIVE]),
    }


def evaluate_pairs(model: PairEvaluatorModel, vocab: BpeVocab,
                   pairs: list[PairExample]) -> dict:
    encoded = _encode_pairs(model, vocab, pairs)
    loss, acc = _pair_eval(model, encoded, model.config.batch_size)
    return {"loss": loss, "accuracy": acc, "count": len(pairs)}


def save_evaluator(path, model: PairEvaluatorModel, *, optimizer_state=None,
                   extra=None) -> None:
    save_checkpoint(path, model.params(), model.config.to_dict(),
                    optimizer_state=optimizer_state,
                    rng_seed=model.config.seed, extra=extra)


def load_evaluator(path, expected_config: EvaluatorConfig | None = None
                   ) -> PairEvaluatorModel:
    expected = expected_config.to_dict() if expected_config else None
    ckpt = load_checkpoint(path, expected_config=expected)
    model = PairEvaluatorModel(EvaluatorConfig(**ckpt.config))
    model.load_params(ckpt.params)
    return model
