"""Dataset and training-dynamics data model, resampling and on-disk formats.

A dynamics file is a CSV with header
``sample_id,given_label,true_label,flag,p_0,...,p_{T-1}`` plus a JSON
sidecar ``<name>.meta.json``. Unknown true labels and flags are stored as -1.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from dyndetect.errors import InvalidArgumentError, ParseError

PROB_DECIMALS = 6
UNKNOWN = -1


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _optional_frozen(a, dtype):
    return None if a is None else _frozen(a, dtype)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature vectors with given labels.

    ``true_labels`` and ``flags`` are populated by the noise generators;
    ``underlying_flags`` only by twice-contamination. Sample ids are the row
    indices.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    true_labels: np.ndarray | None = None
    flags: np.ndarray | None = None
    underlying_flags: np.ndarray | None = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise InvalidArgumentError("features must be a 2-d array")
        n = features.shape[0]
        object.__setattr__(self, "features", _frozen(features, np.float64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        object.__setattr__(self, "true_labels", _optional_frozen(self.true_labels, np.int64))
        object.__setattr__(self, "flags", _optional_frozen(self.flags, np.int64))
        object.__setattr__(self, "underlying_flags", _optional_frozen(self.underlying_flags, np.int64))
        if int(self.num_classes) < 1:
            raise InvalidArgumentError("num_classes must be positive")
        object.__setattr__(self, "num_classes", int(self.num_classes))

        for name in ("labels", "true_labels", "flags", "underlying_flags"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (n,):
                raise InvalidArgumentError(f"{name} must have shape ({n},), got {arr.shape}")
        for name in ("labels", "true_labels"):
            arr = getattr(self, name)
            if arr is not None and n and (arr.min() < 0 or arr.max() >= self.num_classes):
                raise InvalidArgumentError(f"{name} out of range [0, {self.num_classes})")
        for name in ("flags", "underlying_flags"):
            arr = getattr(self, name)
            if arr is not None and not np.isin(arr, (0, 1)).all():
                raise InvalidArgumentError(f"{name} must be 0/1")
        if self.true_labels is not None and self.flags is not None:
            if not np.array_equal(self.flags == 1, self.labels != self.true_labels):
                raise InvalidArgumentError("flag must be 1 exactly where given label != true label")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def sample_ids(self) -> np.ndarray:
        return np.arange(len(self))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        """Rows ``indices`` as a new dataset with ids renumbered from 0."""
        idx = np.asarray(indices, dtype=np.int64)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return LabeledDataset(
            features=self.features[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            true_labels=pick(self.true_labels),
            flags=pick(self.flags),
            underlying_flags=pick(self.underlying_flags),
        )

    def with_labels(self, labels, **changes) -> "LabeledDataset":
        return replace(self, labels=labels, **changes)


@dataclass(frozen=True, eq=False)
class DynamicsTable:
    """Per-sample given-label probabilities across training epochs.

    ``values[i, t]`` is the probability the model assigned to sample ``i``'s
    given label at the end of epoch ``t``.
    """

    values: np.ndarray
    labels: np.ndarray
    true_labels: np.ndarray | None = None
    flags: np.ndarray | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InvalidArgumentError("values must be a (num_samples, num_epochs) matrix")
        n, t = values.shape
        if t < 2:
            raise InvalidArgumentError(f"num_epochs must be >= 2, got {t}")
        if not np.isfinite(values).all() or values.min(initial=0.0) < 0.0 or values.max(initial=0.0) > 1.0:
            raise InvalidArgumentError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(values, np.float64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        object.__setattr__(self, "true_labels", _optional_frozen(self.true_labels, np.int64))
        object.__setattr__(self, "flags", _optional_frozen(self.flags, np.int64))
        object.__setattr__(self, "metadata", dict(self.metadata))
        for name in ("labels", "true_labels", "flags"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (n,):
                raise InvalidArgumentError(f"{name} must have shape ({n},)")
        if self.flags is not None and not np.isin(self.flags, (0, 1)).all():
            raise InvalidArgumentError("flags must be 0/1")

    @property
    def num_samples(self) -> int:
        return self.values.shape[0]

    @property
    def num_epochs(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.num_samples

    def take(self, indices) -> "DynamicsTable":
        idx = np.asarray(indices, dtype=np.int64)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return DynamicsTable(self.values[idx], self.labels[idx], pick(self.true_labels), pick(self.flags), self.metadata)

    def resampled(self, target_len: int) -> "DynamicsTable":
        if target_len == self.num_epochs:
            return self
        values = resample_rows(self.values, target_len)
        meta = dict(self.metadata, resampled_from=self.num_epochs)
        return DynamicsTable(values, self.labels, self.true_labels, self.flags, meta)


def resample_sequence(seq, target_len: int) -> np.ndarray:
    """Piecewise-linear resampling of ``seq`` onto ``target_len`` equally spaced points.

    Positions span ``[0, len(seq) - 1]`` so both endpoints are kept exactly.

    >>> resample_sequence([0.0, 1.0, 0.0], 5).tolist()
    [0.0, 0.5, 1.0, 0.5, 0.0]
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 1:
        raise InvalidArgumentError("seq must be one-dimensional")
    return resample_rows(seq[None, :], target_len)[0]


def resample_rows(values: np.ndarray, target_len: int) -> np.ndarray:
    """Row-wise :func:`resample_sequence` over a matrix."""
    values = np.asarray(values, dtype=np.float64)
    src_len = values.shape[1]
    if src_len < 2 or int(target_len) < 2:
        raise InvalidArgumentError(f"sequence lengths must be >= 2 (got {src_len} -> {target_len})")
    if not np.isfinite(values).all():
        raise InvalidArgumentError("sequence entries must be finite")
    target_len = int(target_len)
    if target_len == src_len:
        return values.copy()
    pos = np.linspace(0.0, src_len - 1, target_len)
    left = np.minimum(np.floor(pos).astype(np.int64), src_len - 2)
    frac = pos - left
    lo = values[:, left]
    hi = values[:, left + 1]
    out = lo + frac * (hi - lo)
    # convex combination; guard against the last-ulp overshoot of lo + frac*(hi-lo)
    out = np.clip(out, np.minimum(lo, hi), np.maximum(lo, hi))
    out[:, 0] = values[:, 0]
    out[:, -1] = values[:, -1]
    return out


def fill_missing_epochs(values: np.ndarray) -> np.ndarray:
    """Replace NaN entries by linear interpolation between the nearest recorded epochs."""
    values = np.array(values, dtype=np.float64, copy=True)
    t = np.arange(values.shape[1])
    for row in values:
        missing = np.isnan(row)
        if missing.all():
            raise InvalidArgumentError("a row has no recorded epochs")
        if missing.any():
            row[missing] = np.interp(t[missing], t[~missing], row[~missing])
    return values


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def _format_prob(p: float) -> str:
    return f"{p:.{PROB_DECIMALS}f}"


def write_dynamics(table: DynamicsTable | np.ndarray, path, **table_kwargs) -> Path:
    """Write ``table`` to ``path`` (CSV) and its JSON sidecar.

    A raw matrix containing NaN for unrecorded epochs may be passed together
    with ``labels=...``; the gaps are interpolated before writing.
    """
    if not isinstance(table, DynamicsTable):
        table = DynamicsTable(fill_missing_epochs(table), **table_kwargs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, t = table.values.shape
    true_labels = table.true_labels if table.true_labels is not None else np.full(n, UNKNOWN)
    flags = table.flags if table.flags is not None else np.full(n, UNKNOWN)
    header = ["sample_id", "given_label", "true_label", "flag"] + [f"p_{j}" for j in range(t)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(n):
            writer.writerow(
                [i, int(table.labels[i]), int(true_labels[i]), int(flags[i])]
                + [_format_prob(p) for p in table.values[i]]
            )
    meta = {
        "num_classes": table.metadata.get("num_classes"),
        "num_epochs": t,
        "seed": table.metadata.get("seed"),
        "schedule": table.metadata.get("schedule"),
        "generator": table.metadata.get("generator"),
    }
    extra = {k: v for k, v in table.metadata.items() if k not in meta}
    meta.update(extra)
    with open(meta_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_dynamics(path) -> DynamicsTable:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty dynamics file", row=0)
    header = rows[0]
    fixed = ["sample_id", "given_label", "true_label", "flag"]
    if header[:4] != fixed:
        raise ParseError(f"header must start with {','.join(fixed)}", row=0)
    prob_cols = header[4:]
    if prob_cols != [f"p_{j}" for j in range(len(prob_cols))]:
        raise ParseError("probability columns must be p_0..p_{T-1}", row=0)
    if len(prob_cols) < 2:
        raise ParseError("at least two epochs required", row=0)

    n = len(rows) - 1
    t = len(prob_cols)
    values = np.empty((n, t))
    labels = np.empty(n, dtype=np.int64)
    true_labels = np.empty(n, dtype=np.int64)
    flags = np.empty(n, dtype=np.int64)
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=r)
        try:
            sid = int(row[0])
        except ValueError:
            raise ParseError("sample_id is not an integer", row=r, column="sample_id") from None
        if sid != r - 1:
            raise ParseError(f"sample_id must be {r - 1}", row=r, column="sample_id")
        for col, target in zip(fixed[1:], (labels, true_labels, flags)):
            try:
                target[r - 1] = int(row[header.index(col)])
            except ValueError:
                raise ParseError("not an integer", row=r, column=col) from None
        for j in range(t):
            try:
                p = float(row[4 + j])
            except ValueError:
                raise ParseError("not a number", row=r, column=prob_cols[j]) from None
            if not 0.0 <= p <= 1.0:
                raise ParseError(f"probability {p} outside [0, 1]", row=r, column=prob_cols[j])
            values[r - 1, j] = p
        if flags[r - 1] not in (UNKNOWN, 0, 1):
            raise ParseError("flag must be -1, 0 or 1", row=r, column="flag")

    metadata: dict[str, Any] = {}
    mp = meta_path(path)
    if mp.exists():
        with open(mp, encoding="utf-8") as fh:
            metadata = json.load(fh)
        if metadata.get("num_epochs") not in (None, t):
            raise ParseError(f"sidecar num_epochs {metadata['num_epochs']} != {t}")

    def known(a):
        if n and (a == UNKNOWN).all():
            return None
        if (a == UNKNOWN).any():
            bad = int(np.flatnonzero(a == UNKNOWN)[0]) + 1
            raise ParseError("column mixes known and unknown (-1) values", row=bad)
        return a

    return DynamicsTable(values, labels, known(true_labels), known(flags), metadata)


def write_dataset(dataset: LabeledDataset, path) -> Path:
    """CSV of ``sample_id,given_label,true_label,flag,underlying_flag,x_0..x_{d-1}``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(dataset)
    cols = {
        "true_label": dataset.true_labels,
        "flag": dataset.flags,
        "underlying_flag": dataset.underlying_flags,
    }
    cols = {k: (v if v is not None else np.full(n, UNKNOWN)) for k, v in cols.items()}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "given_label", *cols] + [f"x_{j}" for j in range(dataset.dim)])
        for i in range(n):
            writer.writerow(
                [i, int(dataset.labels[i])]
                + [int(v[i]) for v in cols.values()]
                + [repr(float(x)) for x in dataset.features[i]]
            )
    with open(meta_path(path), "w", encoding="utf-8") as fh:
        json.dump({"num_classes": dataset.num_classes, "num_samples": n, "dim": dataset.dim}, fh, indent=2)
        fh.write("\n")
    return path


def read_dataset(path) -> LabeledDataset:
    path = Path(path)
    try:
        with open(meta_path(path), encoding="utf-8") as fh:
            num_classes = int(json.load(fh)["num_classes"])
    except (OSError, KeyError, ValueError) as exc:
        raise ParseError(f"missing or invalid sidecar for {path}: {exc}") from None
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:5] != ["sample_id", "given_label", "true_label", "flag", "underlying_flag"]:
        raise ParseError("malformed dataset header", row=0)
    width = len(rows[0])
    body = rows[1:]
    for r, row in enumerate(body, start=1):
        if len(row) != width:
            raise ParseError(f"expected {width} fields, got {len(row)}", row=r)
    try:
        ints = np.array([[int(v) for v in row[:5]] for row in body], dtype=np.int64).reshape(-1, 5)
        feats = np.array([[float(v) for v in row[5:]] for row in body], dtype=np.float64).reshape(len(body), width - 5)
    except ValueError as exc:
        raise ParseError(str(exc)) from None
    if not np.array_equal(ints[:, 0], np.arange(len(body))):
        raise ParseError("sample_ids must be contiguous from 0", column="sample_id")

    def known(a):
        return None if (a == UNKNOWN).all() else a

    return LabeledDataset(feats, ints[:, 1], num_classes, known(ints[:, 2]), known(ints[:, 3]), known(ints[:, 4]))
