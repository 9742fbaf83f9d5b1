"""LSTM window classifier: benign vs attack, or the six traffic classes.

The model unrolls a single LSTM cell over a window of scaled feature rows,
then sends the final hidden state through dropout and a dense softmax head.
Windows come from reshape_sequences, so each one is (window, features) with
the label of its last packet.

Binary mode collapses the five attack families into one "Attack" class;
multi-class keeps all six names. Both modes share the architecture, only the
head width differs.

classify_predicted is the deployment path: predicted packet lines are parsed
back through the stored feature-pipeline parameters and classified. A line
that does not parse is reported as rejected, never silently dropped, so
labeled + rejected always equals the number of lines given.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LabelOutOfRange, LineParseError, ShapeMismatch, UnsafeValue
from .features import PipelineParams, Sequences, transform_values
from .manifest import LABELS
from .nn import (
    Adam, EarlyStopper, LstmParams, Tensor, cross_entropy, dropout, glorot,
    load_checkpoint, log_softmax, lstm_cell, save_checkpoint, softmax, zeros,
)
from .textio import parse_packet_line

BINARY_LABELS: tuple[str, ...] = ("Normal", "Attack")


def class_names(num_classes: int) -> tuple[str, ...]:
    if num_classes == 2:
        return BINARY_LABELS
    if num_classes == 6:
        return LABELS
    raise ConfigError(f"num_classes must be 2 or 6, got {num_classes}")


def label_ids(labels, num_classes: int) -> np.ndarray:
    """Map label names to class ids for the requested head width.

    Binary mode folds every attack family into class 1; the literal name
    "Attack" is also accepted so binary datasets round-trip.
    """
    names = class_names(num_classes)
    out = np.empty(len(labels), dtype=np.int64)
    for i, name in enumerate(labels):
        if num_classes == 2:
            if name == "Normal":
                out[i] = 0
            elif name == "Attack" or name in LABELS[1:]:
                out[i] = 1
            else:
                raise LabelOutOfRange(f"unknown label {name!r}")
        else:
            try:
                out[i] = names.index(name)
            except ValueError:
                raise LabelOutOfRange(f"unknown label {name!r}") from None
    return out


@dataclass(frozen=True)
class ClassifierConfig:
    features: int
    window: int = 10
    num_classes: int = 6
    hidden: int = 64
    dropout: float = 0.2
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 80
    patience: int = 3
    class_weights: tuple | None = None  # optional reweighting, off by default
    seed: int = 0

    def __post_init__(self):
        class_names(self.num_classes)  # validates 2 or 6
        if self.features < 1 or self.window < 1:
            raise ConfigError("features and window must be >= 1")
        if self.class_weights is not None:
            if len(self.class_weights) != self.num_classes:
                raise ConfigError("class_weights length must equal num_classes")
            object.__setattr__(self, "class_weights",
                               tuple(float(w) for w in self.class_weights))

    def to_dict(self) -> dict:
        return {
            "features": self.features, "window": self.window,
            "num_classes": self.num_classes, "hidden": self.hidden,
            "dropout": self.dropout, "lr": self.lr,
            "batch_size": self.batch_size, "max_epochs": self.max_epochs,
            "patience": self.patience,
            "class_weights": list(self.class_weights) if self.class_weights else None,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ClassifierConfig":
        doc = dict(doc)
        if doc.get("class_weights") is not None:
            doc["class_weights"] = tuple(doc["class_weights"])
        return cls(**doc)


class LstmClassifier:
    def __init__(self, config: ClassifierConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.cell = LstmParams(config.features, config.hidden, rng)
        self.w_out = glorot(rng, config.hidden, config.num_classes)
        self.b_out = zeros(config.num_classes)

    def params(self) -> dict:
        out = self.cell.params("lstm")
        out["head.w"] = self.w_out
        out["head.b"] = self.b_out
        return out

    def load_params(self, params: dict) -> None:
        own = self.params()
        if set(own) != set(params):
            raise ConfigError("parameter names do not match this architecture")
        for name, p in own.items():
            if p.data.shape != params[name].data.shape:
                raise ConfigError(f"shape mismatch for {name}")
            p.data[...] = params[name].data

    def forward(self, x: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Window batch (n, window, features) -> logits (n, num_classes)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.config.features:
            raise ShapeMismatch(
                f"expected (n, t, {self.config.features}), got {x.shape}")
        n = x.shape[0]
        h = Tensor(np.zeros((n, self.config.hidden)))
        c = Tensor(np.zeros((n, self.config.hidden)))
        for t in range(x.shape[1]):
            h, c = lstm_cell(Tensor(x[:, t, :]), h, c, self.cell)
        h = dropout(h, self.config.dropout, rng, train=train)
        return h @ self.w_out + self.b_out

    def loss(self, x: np.ndarray, y: np.ndarray, train: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
        logits = self.forward(x, train=train, rng=rng)
        if self.config.class_weights is None:
            return cross_entropy(logits, y)
        y = np.asarray(y)
        if y.size and (y.min() < 0 or y.max() >= self.config.num_classes):
            raise LabelOutOfRange(f"targets outside [0, {self.config.num_classes})")
        w = np.asarray(self.config.class_weights, dtype=np.float64)[y]
        picked = log_softmax(logits, axis=-1).gather_last(y)
        return -((picked * Tensor(w)).sum()) * (1.0 / float(w.sum()))

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.forward(x), axis=-1).data


def _dataset(seqs: Sequences, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(seqs.x, dtype=np.float64), label_ids(seqs.y, num_classes)


def _eval(model: LstmClassifier, x: np.ndarray, y: np.ndarray,
          batch_size: int) -> tuple[float, float]:
    total, hits = 0.0, 0
    for start in range(0, len(x), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        logits = model.forward(xb)
        total += cross_entropy(logits, yb).item() * len(xb)
        hits += int((logits.data.argmax(axis=1) == yb).sum())
    return total / len(x), hits / len(x)


def train_classifier(config: ClassifierConfig, train: Sequences,
                     val: Sequences, log=None) -> tuple[LstmClassifier, dict]:
    """Adam + early stopping on validation loss; returns the best-epoch model."""
    if len(train.x) == 0 or len(val.x) == 0:
        raise ConfigError("empty training or validation set")
    x_tr, y_tr = _dataset(train, config.num_classes)
    x_va, y_va = _dataset(val, config.num_classes)
    model = LstmClassifier(config)
    params = model.params()
    opt = Adam(params, lr=config.lr)
    stopper = EarlyStopper(params, config.patience)
    rng = np.random.default_rng(config.seed + 1)
    history = {"train_loss": [], "val_loss": [], "val_accuracy": [],
               "epochs": 0, "best_epoch": -1}

    order = np.arange(len(x_tr))
    for epoch in range(1, config.max_epochs + 1):
        rng.shuffle(order)
        t0 = time.monotonic()
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            loss = model.loss(x_tr[idx], y_tr[idx], train=True, rng=rng)
            loss.backward()
            opt.step()
        train_loss, _ = _eval(model, x_tr, y_tr, config.batch_size)
        val_loss, val_acc = _eval(model, x_va, y_va, config.batch_size)
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
    return model, history


def classify(model: LstmClassifier, windows: np.ndarray) -> dict:
    """Probabilities and argmax label names for a window batch."""
    probs = model.predict_proba(windows)
    names = class_names(model.config.num_classes)
    ids = probs.argmax(axis=1)
    return {
        "probabilities": probs,
        "label_ids": ids,
        "labels": [names[i] for i in ids],
    }


@dataclass
class PredictedVerdict:
    """Outcome for one predicted packet line."""
    status: str                 # "labeled" or "rejected"
    label: str | None = None
    probabilities: list = field(default_factory=list)
    reason: str | None = None


def _window_for(vec: np.ndarray, history: np.ndarray | None,
                window: int) -> np.ndarray:
    d = vec.shape[0]
    rows = [] if history is None else list(np.asarray(history, dtype=np.float64))
    rows = rows[-(window - 1):] if window > 1 else []
    rows.append(vec)
    if len(rows) < window:
        pad = [np.zeros(d)] * (window - len(rows))
        rows = pad + rows
    return np.stack(rows)


def classify_predicted(model: LstmClassifier, params: PipelineParams,
                       lines, histories=None) -> dict:
    """Parse predicted packet lines back through the fitted pipeline and
    classify each one.

    histories, when given, is one (k, features) array of already-transformed
    preceding rows per line; the window is the last window-1 of those plus
    the new row, zero-padded at the front like reshape_sequences. Unparseable
    lines come back with status "rejected" and a reason; counts always
    satisfy labeled + rejected == len(lines).
    """
    lines = list(lines)
    if params.window != model.config.window:
        raise ConfigError(
            f"pipeline window {params.window} != model window {model.config.window}")
    if histories is not None and len(histories) != len(lines):
        raise ConfigError("histories must align with lines")
    verdicts: list[PredictedVerdict] = [None] * len(lines)  # type: ignore
    windows, keep = [], []
    for i, line in enumerate(lines):
        try:
            values = parse_packet_line(line, params.selected)
            vec = transform_values(values, params)
        except (LineParseError, UnsafeValue) as exc:
            verdicts[i] = PredictedVerdict(status="rejected", reason=str(exc))
            continue
        hist = histories[i] if histories is not None else None
        windows.append(_window_for(vec, hist, params.window))
        keep.append(i)
    if windows:
        result = classify(model, np.stack(windows))
        for j, i in enumerate(keep):
            verdicts[i] = PredictedVerdict(
                status="labeled",
                label=result["labels"][j],
                probabilities=[float(p) for p in result["probabilities"][j]],
            )
    labeled = sum(v.status == "labeled" for v in verdicts)
    return {
        "verdicts": verdicts,
        "labeled": labeled,
        "rejected": len(lines) - labeled,
        "generated": len(lines),
    }


def save_classifier(path, model: LstmClassifier, *, optimizer_state=None,
                    extra=None) -> None:
    save_checkpoint(path, model.params(), model.config.to_dict(),
                    optimizer_state=optimizer_state,
                    rng_seed=model.config.seed, extra=extra)


def load_classifier(path, expected_config: ClassifierConfig | None = None
                    ) -> LstmClassifier:
    expected = expected_config.to_dict() if expected_config else None
    ckpt = load_checkpoint(path, expected_config=expected)
    model = LstmClassifier(ClassifierConfig.from_dict(ckpt.config))
    model.load_params(ckpt.params)
    return model
