"""Tables, CSV input, min-max scaling, splits, the synthetic benchmark and model files."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nn import as_rng

RESERVED = ("label", "ident", "id")
FORMAT_VERSION = 1


@dataclass
class LabeledTable:
    """Feature matrix plus optional ground truth (0 = anomaly, 1 = normal) and identified flags."""

    features: np.ndarray
    ground_truth: np.ndarray | None = None
    identified: np.ndarray | None = None
    row_ids: np.ndarray | None = None
    feature_names: list | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[1] < 1:
            raise FormatError("features must be an n x d matrix with d >= 1")
        n = len(self.features)
        if self.ground_truth is not None:
            self.ground_truth = np.asarray(self.ground_truth, dtype=np.int64)
            if self.ground_truth.shape != (n,) or not np.isin(self.ground_truth, (0, 1)).all():
                raise FormatError("ground truth must be one 0/1 label per row")
        self.identified = (np.zeros(n, dtype=bool) if self.identified is None
                           else np.asarray(self.identified, dtype=bool))
        if self.identified.shape != (n,):
            raise FormatError("identified flags must be one per row")
        if self.ground_truth is not None and np.any(self.identified & (self.ground_truth == 1)):
            raise FormatError("identified rows must be anomalies")
        self.row_ids = np.arange(n) if self.row_ids is None else np.asarray(self.row_ids)
        if self.feature_names is None:
            self.feature_names = [f"f{j + 1}" for j in range(self.features.shape[1])]

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "LabeledTable":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledTable(
            self.features[idx],
            None if self.ground_truth is None else self.ground_truth[idx],
            self.identified[idx], self.row_ids[idx], list(self.feature_names),
        )

    def with_features(self, features) -> "LabeledTable":
        return LabeledTable(features, self.ground_truth, self.identified, self.row_ids, list(self.feature_names))

    @property
    def unlabeled(self) -> np.ndarray:
        return self.features[~self.identified]

    @property
    def anomalies(self) -> np.ndarray:
        return self.features[self.identified]


def _parse_float(cell, line, col):
    try:
        v = float(cell)
    except ValueError:
        raise FormatError(f"row {line}: column {col!r} is not numeric: {cell!r}") from None
    if not math.isfinite(v):
        raise FormatError(f"row {line}: column {col!r} is not finite")
    return v


def _parse_flag(cell, line, col):
    v = _parse_float(cell, line, col)
    if v not in (0.0, 1.0):
        raise FormatError(f"row {line}: column {col!r} must be 0 or 1, got {cell!r}")
    return int(v)


def load_csv(path) -> LabeledTable:
    """Read a headed CSV; ``label``, ``ident`` and ``id`` columns are optional metadata."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            raise FormatError(f"{path}: duplicate column names")
        feat_cols = [j for j, h in enumerate(header) if h not in RESERVED]
        if not feat_cols:
            raise FormatError(f"{path}: no feature columns")
        pos = {h: header.index(h) for h in RESERVED if h in header}
        feats, labels, idents, ids = [], [], [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"row {line}: expected {len(header)} cells, got {len(row)}")
            feats.append([_parse_float(row[j], line, header[j]) for j in feat_cols])
            lab = _parse_flag(row[pos["label"]], line, "label") if "label" in pos else None
            ident = _parse_flag(row[pos["ident"]], line, "ident") if "ident" in pos else 0
            if ident == 1 and lab == 1:
                raise FormatError(f"row {line}: ident=1 on a row labelled normal")
            labels.append(lab)
            idents.append(ident)
            ids.append(row[pos["id"]] if "id" in pos else line - 2)
    if not feats:
        raise FormatError(f"{path}: no data rows")
    return LabeledTable(
        np.array(feats),
        np.array(labels) if "label" in pos else None,
        np.array(idents, dtype=bool),
        np.array(ids),
        [header[j] for j in feat_cols],
    )


def _fmt(v) -> str:
    return repr(float(v))


def write_csv(table: LabeledTable, path) -> None:
    """Write ``table`` in the CSV contract (shortest round-trip float text)."""
    header = ["id"] + list(table.feature_names)
    if table.ground_truth is not None:
        header.append("label")
    header.append("ident")
    rows = []
    for i in range(table.n):
        row = [str(table.row_ids[i])] + [_fmt(v) for v in table.features[i]]
        if table.ground_truth is not None:
            row.append(str(int(table.ground_truth[i])))
        row.append(str(int(table.identified[i])))
        rows.append(row)

    def dump(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)

    atomic_write(path, dump, newline="")


@dataclass
class Scaler:
    minimum: np.ndarray
    maximum: np.ndarray

    def to_dict(self):
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["min"], dtype=np.float64), np.asarray(d["max"], dtype=np.float64))


def fit_scaler(table) -> Scaler:
    X = table.features if isinstance(table, LabeledTable) else np.asarray(table, dtype=np.float64)
    if len(X) == 0:
        raise FormatError("cannot fit a scaler on zero rows")
    return Scaler(X.min(axis=0), X.max(axis=0))


def apply_scaler(scaler: Scaler, table):
    """Min-max map into [0, 1] with clipping; constant features become 0.5."""
    X = table.features if isinstance(table, LabeledTable) else np.asarray(table, dtype=np.float64)
    if X.shape[1] != len(scaler.minimum):
        raise FormatError(f"table has {X.shape[1]} features, scaler expects {len(scaler.minimum)}")
    span = scaler.maximum - scaler.minimum
    const = span <= 0
    out = (X - scaler.minimum) / np.where(const, 1.0, span)
    out[:, const] = 0.5
    out = np.clip(out, 0.0, 1.0)
    return table.with_features(out) if isinstance(table, LabeledTable) else out


def _largest_remainder(total, sizes):
    sizes = np.asarray(sizes, dtype=np.float64)
    raw = total * sizes / sizes.sum()
    counts = np.floor(raw).astype(np.int64)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: total - counts.sum()]] += 1
    return counts


def split_train_test(table: LabeledTable, seed=None) -> tuple[LabeledTable, LabeledTable]:
    """Stratified 2:1 split; the training side gets ceil(2n/3) rows."""
    if table.ground_truth is None:
        raise FormatError("split needs ground truth labels")
    rng = as_rng(seed)
    classes = [np.flatnonzero(table.ground_truth == c) for c in (0, 1)]
    classes = [c for c in classes if len(c)]
    if any(len(c) < 3 for c in classes):
        warnings.warn("a class has fewer than 3 rows; stratification is best effort", stacklevel=2)
    n_train = math.ceil(2 * table.n / 3)
    quotas = _largest_remainder(n_train, [len(c) for c in classes])
    train = []
    for members, quota in zip(classes, quotas):
        train.append(rng.permutation(members)[:quota])
    train = np.sort(np.concatenate(train))
    test = np.setdiff1d(np.arange(table.n), train)
    return table.take(train), table.take(test)


def identified_count(anomaly_count: int, ratio: float) -> int:
    # round first so 0.1 * 30 does not become 4 through 3.0000000000000004
    return int(math.ceil(round(ratio * anomaly_count, 9)))


def sample_identified(table: LabeledTable, ratio: float, seed=None) -> LabeledTable:
    if table.ground_truth is None:
        raise FormatError("identified sampling needs ground truth labels")
    if not 0.0 <= ratio <= 1.0:
        raise FormatError(f"ratio must lie in [0, 1], got {ratio}")
    anomalies = np.flatnonzero(table.ground_truth == 0)
    count = identified_count(len(anomalies), ratio)
    flags = np.zeros(table.n, dtype=bool)
    if count:
        flags[as_rng(seed).choice(anomalies, size=count, replace=False)] = True
    return LabeledTable(table.features, table.ground_truth, flags, table.row_ids, list(table.feature_names))


@dataclass
class SyntheticSpec:
    normal_centers: tuple = ((0.3, 0.3), (0.7, 0.7))
    normal_spread: float = 0.05
    normal_counts: tuple = (200, 200)
    group_centers: tuple = ((0.25, 0.75), (0.75, 0.25))
    group_spread: float = 0.02
    group_counts: tuple = (60, 60)
    discrete_train: int = 2
    discrete_test: int = 5
    discrete_exclusion: float = 0.15
    discrete_min_gap: float = 0.1
    identified: int = 5
    seed: int = 0

    def __post_init__(self):
        counts = list(self.normal_counts) + list(self.group_counts) + [self.discrete_train, self.discrete_test, self.identified]
        if min(counts) < 0:
            raise FormatError("synthetic counts must be non-negative")
        if self.normal_spread <= 0 or self.group_spread <= 0:
            raise FormatError("synthetic spreads must be positive")


def _discrete(rng, count, centers, others, spec):
    out = []
    for _ in range(100_000):
        if len(out) == count:
            break
        c = rng.uniform(0.0, 1.0, size=2)
        if np.min(np.linalg.norm(centers - c, axis=1)) < spec.discrete_exclusion:
            continue
        pts = np.vstack([others] + out) if out else others
        if len(pts) and np.min(np.linalg.norm(pts - c, axis=1)) < spec.discrete_min_gap:
            continue
        out.append(c[None])
    if len(out) < count:
        raise FormatError("could not place discrete anomalies; loosen exclusion settings")
    return np.vstack(out) if out else np.zeros((0, 2))


def _synthetic_side(rng, spec, n_discrete):
    parts, labels = [], []
    for c, k in zip(spec.normal_centers, spec.normal_counts):
        parts.append(rng.normal(c, spec.normal_spread, size=(k, 2)))
        labels.append(np.ones(k, dtype=np.int64))
    for c, k in zip(spec.group_centers, spec.group_counts):
        parts.append(rng.normal(c, spec.group_spread, size=(k, 2)))
        labels.append(np.zeros(k, dtype=np.int64))
    clusters = np.vstack(parts)
    centers = np.array(list(spec.normal_centers) + list(spec.group_centers), dtype=np.float64)
    parts.append(_discrete(rng, n_discrete, centers, clusters, spec))
    labels.append(np.zeros(n_discrete, dtype=np.int64))
    return np.vstack(parts), np.concatenate(labels)


def gen_synthetic(spec: SyntheticSpec | None = None) -> tuple[LabeledTable, LabeledTable]:
    """Two normal clusters, two dense group-anomaly clusters and a few scattered anomalies."""
    spec = spec or SyntheticSpec()
    rng = as_rng(spec.seed)
    Xtr, ytr = _synthetic_side(rng, spec, spec.discrete_train)
    Xte, yte = _synthetic_side(rng, spec, spec.discrete_test)
    anomalies = np.flatnonzero(ytr == 0)
    if spec.identified > len(anomalies):
        raise FormatError("more identified anomalies requested than exist")
    ident = np.zeros(len(ytr), dtype=bool)
    ident[rng.choice(anomalies, size=spec.identified, replace=False)] = True
    return LabeledTable(Xtr, ytr, ident), LabeledTable(Xte, yte)


def atomic_write(path, writer, *, mode="w", newline=None) -> None:
    """Write through a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, encoding=None if "b" in mode else "utf-8", newline=newline) as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    atomic_write(path, lambda fh: fh.write(text))


def _checksum(payload) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def save_model(model, path) -> None:
    payload = model.to_dict()
    payload["format_version"] = FORMAT_VERSION
    doc = dict(payload, checksum=_checksum(payload))
    dump_json(doc, path)


def load_model(path):
    from .detectors import TrainedModel

    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"no such model file: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: not a valid model file ({exc})") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise FormatError(f"{path}: missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {doc['format_version']!r} "
                          f"(this build reads {FORMAT_VERSION})")
    checksum = doc.pop("checksum", None)
    if checksum != _checksum(doc):
        raise FormatError(f"{path}: checksum mismatch")
    try:
        return TrainedModel.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed model ({exc})") from None
