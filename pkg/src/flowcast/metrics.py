"""Evaluation artifacts: confusion matrix, per-class report, ROC and AUC.

Conventions:
  - confusion matrix rows are true classes, columns predicted;
  - binary counts treat the positive class as the attack side, so TP is an
    attack correctly called an attack and TN a normal correctly called normal;
  - precision with an empty predicted-positive set is defined as 0.0 and
    flagged (zero_division), recall behaves the same for empty support;
  - ROC sweeps unique scores as thresholds in descending order (predict
    positive when score >= threshold) and AUC is the trapezoid area, which
    equals the pairwise ranking probability P(s+ > s-) + 0.5 P(s+ = s-).

Everything here is a pure function on labels/scores; rendering writes JSON,
fixed-width text, and optional matplotlib plots.
"""
from __future__ import annotations

import json

import numpy as np

from .classifier import BINARY_LABELS
from .errors import IoFailure, LabelOutOfRange, LengthMismatch, SingleClass
from .manifest import LABELS

SCHEMA_VERSION = 1

# canonical display order when no explicit class list is given
_KNOWN_ORDER: tuple[str, ...] = LABELS + ("Attack",)


def _class_order(true_labels, predicted_labels, classes=None) -> list[str]:
    seen = set(true_labels) | set(predicted_labels)
    if classes is not None:
        classes = list(classes)
        extra = seen - set(classes)
        if extra:
            raise LabelOutOfRange(f"labels {sorted(extra)} not in class list")
        return classes
    if seen <= set(_KNOWN_ORDER):
        return [c for c in _KNOWN_ORDER if c in seen]
    return sorted(seen)


def confusion_matrix(true_labels, predicted_labels, classes) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        cm[index[t], index[p]] += 1
    return cm


def compute_metrics(true_labels, predicted_labels, positive_class=None,
                    classes=None) -> dict:
    """Accuracy plus one-vs-rest precision/recall/F1 per class.

    With positive_class set, the report also carries the plain binary
    TP/TN/FP/FN counts and metrics for that class against the rest.
    """
    true_labels = list(true_labels)
    predicted_labels = list(predicted_labels)
    if len(true_labels) != len(predicted_labels):
        raise LengthMismatch(
            f"{len(true_labels)} true vs {len(predicted_labels)} predicted")
    if not true_labels:
        raise LengthMismatch("no samples to evaluate")
    order = _class_order(true_labels, predicted_labels, classes)
    if positive_class is not None and positive_class not in order:
        raise LabelOutOfRange(f"positive class {positive_class!r} not present")
    cm = confusion_matrix(true_labels, predicted_labels, order)
    total = int(cm.sum())
    accuracy = float(np.trace(cm)) / total

    per_class = {}
    for i, name in enumerate(order):
        tp = int(cm[i, i])
        fp = int(cm[:, i].sum() - tp)
        fn = int(cm[i, :].sum() - tp)
        support = int(cm[i, :].sum())
        zero_division = (tp + fp) == 0 or support == 0
        precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
        recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if (precision + recall) > 0 else 0.0)
        per_class[name] = {
            "precision": precision, "recall": recall, "f1": f1,
            "support": support, "zero_division": zero_division,
        }

    supports = np.array([per_class[c]["support"] for c in order], dtype=np.float64)
    weights = supports / supports.sum()
    macro = {k: float(np.mean([per_class[c][k] for c in order]))
             for k in ("precision", "recall", "f1")}
    weighted = {k: float(np.sum(weights * [per_class[c][k] for c in order]))
                for k in ("precision", "recall", "f1")}

    report = {
        "schema_version": SCHEMA_VERSION,
        "classes": list(order),
        "confusion": cm.tolist(),
        "total": total,
        "accuracy": accuracy,
        "per_class": per_class,
        "macro": macro,
        "weighted": weighted,
    }
    if positive_class is not None:
        i = order.index(positive_class)
        tp = int(cm[i, i])
        fn = int(cm[i, :].sum() - tp)
        fp = int(cm[:, i].sum() - tp)
        tn = total - tp - fn - fp
        report["positive_class"] = positive_class
        report["binary"] = {
            "tp": tp, "tn": tn, "fp": fp, "fn": fn,
            "accuracy": (tp + tn) / total,
            "precision": per_class[positive_class]["precision"],
            "recall": per_class[positive_class]["recall"],
            "f1": per_class[positive_class]["f1"],
        }
    return report


def roc_curve(true_labels, positive_scores, positive_class="Attack") -> dict:
    """ROC points over descending unique thresholds, plus trapezoid AUC."""
    true_labels = list(true_labels)
    scores = np.asarray(list(positive_scores), dtype=np.float64)
    if len(true_labels) != len(scores):
        raise LengthMismatch(f"{len(true_labels)} labels vs {len(scores)} scores")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    is_pos = np.array([t == positive_class for t in true_labels])
    n_pos, n_neg = int(is_pos.sum()), int((~is_pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"need both classes, got {n_pos} positive / {n_neg} negative")

    # integer tp/fp counts per threshold; the trapezoid sum then stays exact
    # (one float division at the end), matching the pairwise oracle bit for bit
    counts = [(float("inf"), 0, 0)]
    for thr in sorted(set(scores.tolist()), reverse=True):
        called = scores >= thr
        counts.append((thr, int((called & ~is_pos).sum()),
                       int((called & is_pos).sum())))
    area2 = 0  # twice the area, in units of 1/(n_pos*n_neg)
    for (_, f0, t0), (_, f1, t1) in zip(counts, counts[1:]):
        area2 += (f1 - f0) * (t0 + t1)
    return {
        "positive_class": positive_class,
        "points": [{"threshold": t, "fpr": f / n_neg, "tpr": p / n_pos}
                   for t, f, p in counts],
        "auc": area2 / (2 * n_pos * n_neg),
    }


def mann_whitney_auc(true_labels, positive_scores, positive_class="Attack") -> float:
    """Brute-force pairwise oracle: P(s+ > s-) + 0.5 P(s+ = s-)."""
    pos = [s for t, s in zip(true_labels, positive_scores) if t == positive_class]
    neg = [s for t, s in zip(true_labels, positive_scores) if t != positive_class]
    if not pos or not neg:
        raise SingleClass("need both classes")
    wins = ties = 0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1
            elif p == n:
                ties += 1
    return (2 * wins + ties) / (2 * len(pos) * len(neg))


# --- rendering ---

def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def format_report(report: dict) -> str:
    """Fixed-width per-class table in the usual classification-report shape."""
    order = report["classes"]
    width = max(12, max(len(c) for c in order) + 2)
    head = f"{'':>{width}}  precision    recall  f1-score   support"
    lines = [head, ""]
    for name in order:
        row = report["per_class"][name]
        lines.append(f"{name:>{width}}  {row['precision']:9.4f} {row['recall']:9.4f} "
                     f"{row['f1']:9.4f} {row['support']:9d}")
    lines.append("")
    lines.append(f"{'accuracy':>{width}}  {'':9} {'':9} "
                 f"{report['accuracy']:9.4f} {report['total']:9d}")
    for tag, block in (("macro avg", report["macro"]),
                       ("weighted avg", report["weighted"])):
        lines.append(f"{tag:>{width}}  {block['precision']:9.4f} "
                     f"{block['recall']:9.4f} {block['f1']:9.4f} "
                     f"{report['total']:9d}")
    if "auc" in report:
        lines.append("")
        lines.append(f"{'auc':>{width}}  {report['auc']:9.4f}")
    return "\n".join(lines) + "\n"


def roc_points_csv(roc: dict) -> str:
    lines = ["threshold,fpr,tpr"]
    for p in roc["points"]:
        lines.append(f"{p['threshold']},{p['fpr']},{p['tpr']}")
    return "\n".join(lines) + "\n"


def _write(path, text: str) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def plot_roc(roc: dict, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fpr = [p["fpr"] for p in roc["points"]]
    tpr = [p["tpr"] for p in roc["points"]]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(fpr, tpr, marker=".", label=f"AUC = {roc['auc']:.4f}")
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", label="chance")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    try:
        fig.savefig(path, dpi=120, bbox_inches="tight")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)


def plot_losses(history: dict, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = range(1, len(history["train_loss"]) + 1)
    ax.plot(epochs, history["train_loss"], label="train")
    if history.get("val_loss"):
        ax.plot(epochs, history["val_loss"], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    try:
        fig.savefig(path, dpi=120, bbox_inches="tight")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)


def render_report(report: dict, *, json_path=None, text_path=None,
                  roc=None, roc_csv_path=None, roc_png=None,
                  loss_history=None, loss_png=None) -> dict:
    """Write the requested artifacts; returns {kind: path} for what was written."""
    written = {}
    if json_path is not None:
        _write(json_path, report_json(report))
        written["json"] = json_path
    if text_path is not None:
        _write(text_path, format_report(report))
        written["text"] = text_path
    if roc is not None and roc_csv_path is not None:
        _write(roc_csv_path, roc_points_csv(roc))
        written["roc_csv"] = roc_csv_path
    if roc is not None and roc_png is not None:
        plot_roc(roc, roc_png)
        written["roc_png"] = roc_png
    if loss_history is not None and loss_png is not None:
        plot_losses(loss_history, loss_png)
        written["loss_png"] = loss_png
    return written
