"""Feature engineering: ordinal encoding, filtering, scaling, windowing, splits.

Conventions used throughout:
- matrices are float64, one row per packet, columns in manifest order (or the
  surviving subset after selection);
- missing numeric values are the -1.0 sentinel, unseen categories map to -1;
- fit/transform are separate: fitting happens on training data only and the
  fitted parameters are plain data (JSON-serializable) that transform replays.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ClassTooSmall, EmptyResult
from .manifest import CATEGORICAL, FIELD_NAMES

MISSING = -1.0


@dataclass
class FeatureMatrix:
    columns: list[str]
    data: np.ndarray                 # (n, d) float64
    flow_index: np.ndarray           # (n,) int64
    labels: np.ndarray               # (n,) str
    encoder_maps: dict = field(default_factory=dict)
    scaler_params: dict = field(default_factory=dict)
    audit: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    def take_rows(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, data=self.data[idx], flow_index=self.flow_index[idx],
                       labels=self.labels[idx])


def encode_ordinal(records, maps: dict | None = None, columns=None) -> FeatureMatrix:
    """Turn PacketRecords into a numeric matrix.

    Categorical columns get dense first-seen integer codes when maps is None
    (fitting); with maps given, unseen categories become -1 and are counted in
    flags["unseen"]. Missing numerics become the -1.0 sentinel.
    """
    columns = list(columns) if columns is not None else list(FIELD_NAMES)
    cat = set(CATEGORICAL) & set(columns)
    fitting = maps is None
    maps = {c: {} for c in cat} if fitting else {c: dict(maps.get(c, {})) for c in cat}
    unseen = 0

    n = len(records)
    data = np.empty((n, len(columns)), dtype=np.float64)
    for i, rec in enumerate(records):
        feats = rec.features
        for j, col in enumerate(columns):
            v = feats.get(col)
            if col in cat:
                key = "none" if v is None else str(v)
                code = maps[col].get(key)
                if code is None:
                    if fitting:
                        code = len(maps[col])
                        maps[col][key] = code
                    else:
                        code = -1
                        unseen += 1
                data[i, j] = float(code)
            else:
                data[i, j] = MISSING if v is None else float(v)

    fm = FeatureMatrix(
        columns=columns,
        data=data,
        flow_index=np.array([r.flow_index for r in records], dtype=np.int64),
        labels=np.array([r.label for r in records], dtype=object),
        encoder_maps=maps,
    )
    if unseen:
        fm.flags["unseen"] = unseen
    return fm


def _prescaled_variance(col: np.ndarray) -> float:
    lo, hi = col.min(), col.max()
    if hi == lo:
        return 0.0
    return float(np.var((col - lo) / (hi - lo)))


def select_features(fm: FeatureMatrix, var_threshold: float = 0.25,
                    corr_threshold: float = 0.9) -> FeatureMatrix:
    """Drop near-constant and redundant columns.

    Stage 1 computes the variance of each column rescaled to [0, 1] and drops
    those below var_threshold * 0.25 (so the default 0.25 means cutoff 0.0625).
    Stage 2 walks the survivors in column order and drops any column whose
    absolute Pearson correlation with an earlier *kept* column exceeds
    corr_threshold. Every drop is recorded in .audit as (column, reason, stat).
    """
    if fm.n_rows == 0:
        raise EmptyResult("no rows to select features on")
    cutoff = var_threshold * 0.25
    audit = list(fm.audit)
    keep: list[int] = []
    for j, col in enumerate(fm.columns):
        v = _prescaled_variance(fm.data[:, j])
        if v < cutoff:
            audit.append((col, "low_variance", v))
        else:
            keep.append(j)

    kept: list[int] = []
    for j in keep:
        x = fm.data[:, j]
        sx = x.std()
        dropped = False
        for k in kept:
            y = fm.data[:, k]
            sy = y.std()
            if sx == 0.0 or sy == 0.0:
                continue
            r = float(np.corrcoef(x, y)[0, 1])
            if math.isnan(r):
                continue
            if abs(r) > corr_threshold:
                audit.append((fm.columns[j], f"correlated_with:{fm.columns[k]}", r))
                dropped = True
                break
        if not dropped:
            kept.append(j)

    if not kept:
        raise EmptyResult("feature selection dropped every column")
    return replace(
        fm,
        columns=[fm.columns[j] for j in kept],
        data=fm.data[:, kept].copy(),
        audit=audit,
        scaler_params={},
    )


def minmax_scale(fm: FeatureMatrix, params: dict | None = None) -> FeatureMatrix:
    """Per-column (x - min) / (max - min).

    Fitting (params None) records train min/max per column. Transforming with
    given params clamps out-of-range values into [0, 1]. A degenerate column
    (max == min at fit time) scales to all zeros and is listed in
    flags["degenerate"].
    """
    if params is None:
        params = {}
        for j, col in enumerate(fm.columns):
            x = fm.data[:, j]
            params[col] = (float(x.min()), float(x.max()))
    out = np.empty_like(fm.data)
    degenerate = []
    for j, col in enumerate(fm.columns):
        lo, hi = params[col]
        if hi == lo:
            out[:, j] = 0.0
            degenerate.append(col)
        else:
            out[:, j] = np.clip((fm.data[:, j] - lo) / (hi - lo), 0.0, 1.0)
    flags = dict(fm.flags)
    if degenerate:
        flags["degenerate"] = degenerate
    return replace(fm, data=out, scaler_params=dict(params), flags=flags)


# --- splitting ---

def _allocate(n: int, fractions) -> list[int]:
    raw = [f * n for f in fractions]
    base = [int(math.floor(r)) for r in raw]
    rem = n - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rem]:
        base[i] += 1
    # every split with a positive fraction gets at least one row
    for i in range(len(base)):
        if base[i] == 0 and fractions[i] > 0:
            j = max(range(len(base)), key=lambda k: (base[k], -k))
            base[j] -= 1
            base[i] += 1
    return base


def _check_fractions(fractions):
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negatives summing to 1, got {fractions}")


def split(fm: FeatureMatrix, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Stratified row split into (train, val, test).

    Per-class largest-remainder allocation; a class present at all lands at
    least one row in each split. Deterministic under seed.
    """
    _check_fractions(fractions)
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for label in sorted(set(fm.labels.tolist())):
        idx = np.flatnonzero(fm.labels == label)
        if len(idx) < 3:
            raise ClassTooSmall(f"class {label!r} has {len(idx)} rows, need >= 3")
        idx = idx[rng.permutation(len(idx))]
        counts = _allocate(len(idx), fractions)
        pos = 0
        for s in range(3):
            parts[s].extend(idx[pos:pos + counts[s]].tolist())
            pos += counts[s]
    return tuple(fm.take_rows(sorted(p)) for p in parts)


def split_flows(fm: FeatureMatrix, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Stratified split at flow granularity: a flow's rows stay together.

    The flow's label is its first row's label. Needs >= 3 flows per class.
    """
    _check_fractions(fractions)
    rng = np.random.default_rng(seed)
    first_row: dict[int, int] = {}
    flow_rows: dict[int, list[int]] = {}
    for i, fl in enumerate(fm.flow_index.tolist()):
        flow_rows.setdefault(fl, []).append(i)
        first_row.setdefault(fl, i)
    flows_by_label: dict[str, list[int]] = {}
    for fl, rows in flow_rows.items():
        flows_by_label.setdefault(str(fm.labels[first_row[fl]]), []).append(fl)

    parts: list[list[int]] = [[], [], []]
    for label in sorted(flows_by_label):
        flows = sorted(flows_by_label[label])
        if len(flows) < 3:
            raise ClassTooSmall(f"class {label!r} has {len(flows)} flows, need >= 3")
        flows = [flows[i] for i in rng.permutation(len(flows))]
        counts = _allocate(len(flows), fractions)
        pos = 0
        for s in range(3):
            for fl in flows[pos:pos + counts[s]]:
                parts[s].extend(flow_rows[fl])
            pos += counts[s]
    return tuple(fm.take_rows(sorted(p)) for p in parts)


# --- windowing ---

@dataclass
class Sequences:
    x: np.ndarray        # (n, window, d)
    y: np.ndarray        # (n,) label strings
    flow: np.ndarray     # (n,) flow index of each window
    padded: np.ndarray   # (n,) bool, True when the window was front-padded


def reshape_sequences(fm: FeatureMatrix, window: int) -> Sequences:
    """Sliding windows within each flow, never across flows.

    A flow with L >= window rows yields L - window + 1 windows; a shorter flow
    yields one window zero-padded at the front. The window label is the label
    of its last packet.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    xs, ys, fls, pads = [], [], [], []
    order: dict[int, list[int]] = {}
    for i, fl in enumerate(fm.flow_index.tolist()):
        order.setdefault(fl, []).append(i)
    d = fm.data.shape[1]
    for fl, rows in order.items():
        arr = fm.data[rows]
        if len(rows) >= window:
            for i in range(len(rows) - window + 1):
                xs.append(arr[i:i + window])
                ys.append(fm.labels[rows[i + window - 1]])
                fls.append(fl)
                pads.append(False)
        else:
            pad = np.zeros((window - len(rows), d), dtype=fm.data.dtype)
            xs.append(np.concatenate([pad, arr], axis=0))
            ys.append(fm.labels[rows[-1]])
            fls.append(fl)
            pads.append(True)
    x = np.stack(xs) if xs else np.zeros((0, window, d))
    return Sequences(
        x=x,
        y=np.array(ys, dtype=object),
        flow=np.array(fls, dtype=np.int64),
        padded=np.array(pads, dtype=bool),
    )


# --- fitted-parameter sidecar ---

@dataclass
class PipelineParams:
    """Everything needed to replay the fitted transform on new packets."""

    selected: list[str]
    encoder_maps: dict
    scaler_params: dict
    window: int
    version: int = 1

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "selected": self.selected,
            "encoder_maps": self.encoder_maps,
            "scaler_params": {c: list(v) for c, v in self.scaler_params.items()},
            "window": self.window,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PipelineParams":
        doc = json.loads(text)
        return cls(
            selected=list(doc["selected"]),
            encoder_maps={c: dict(m) for c, m in doc["encoder_maps"].items()},
            scaler_params={c: (float(v[0]), float(v[1])) for c, v in doc["scaler_params"].items()},
            window=int(doc["window"]),
            version=int(doc.get("version", 1)),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "PipelineParams":
        with open(path) as fh:
            return cls.from_json(fh.read())


def fit_pipeline(train_records, var_threshold=0.25, corr_threshold=0.9,
                 window=10) -> tuple[FeatureMatrix, PipelineParams]:
    """Fit encode -> select -> scale on training records; return both the
    transformed training matrix and the replayable parameters."""
    fm = encode_ordinal(train_records)
    fm = select_features(fm, var_threshold, corr_threshold)
    fm = minmax_scale(fm)
    params = PipelineParams(
        selected=list(fm.columns),
        encoder_maps={c: dict(m) for c, m in fm.encoder_maps.items() if c in fm.columns},
        scaler_params=dict(fm.scaler_params),
        window=window,
    )
    return fm, params


def apply_pipeline(records, params: PipelineParams) -> FeatureMatrix:
    """Replay a fitted transform on new records (no statistics are refit)."""
    fm = encode_ordinal(records, maps=params.encoder_maps, columns=params.selected)
    return minmax_scale(fm, params=params.scaler_params)


def transform_values(values: dict, params: PipelineParams) -> np.ndarray:
    """Transform one parsed packet-line dict into a scaled feature vector."""
    cat = set(CATEGORICAL)
    vec = np.empty(len(params.selected), dtype=np.float64)
    for j, col in enumerate(params.selected):
        v = values.get(col)
        if col in cat:
            key = "none" if v is None else str(v)
            vec[j] = float(params.encoder_maps.get(col, {}).get(key, -1))
        else:
            vec[j] = MISSING if v is None else float(v)
        lo, hi = params.scaler_params[col]
        vec[j] = 0.0 if hi == lo else min(1.0, max(0.0, (vec[j] - lo) / (hi - lo)))
    return vec
