"""Two-party vertical datasets: synthetic generation, CSV ingestion, splits and probe sets."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CENTER_SEPARATION = 2.0


class DataError(ValueError):
    """Raised for malformed or inconsistent dataset inputs."""


@dataclass(frozen=True)
class VerticalDataset:
    """Feature matrix split column-wise between an active and a passive party.

    Only the active party owns ``labels``. Rows are pre-aligned across both
    views and identified by ``instance_ids``.
    """

    active_features: np.ndarray
    passive_features: np.ndarray
    labels: np.ndarray
    num_classes: int
    instance_ids: np.ndarray
    active_names: tuple[str, ...] = field(default=())
    passive_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        n = len(self.labels)
        if self.active_features.shape[0] != n or self.passive_features.shape[0] != n:
            raise DataError("active features, passive features and labels must have the same row count")
        if len(self.instance_ids) != n:
            raise DataError("instance_ids length does not match the row count")
        if len(np.unique(self.instance_ids)) != n:
            raise DataError("instance_ids must be unique")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if not self.active_names:
            object.__setattr__(self, "active_names", tuple(f"a{i}" for i in range(self.num_active)))
        if not self.passive_names:
            object.__setattr__(self, "passive_names", tuple(f"p{i}" for i in range(self.num_passive)))
        for arr in (self.active_features, self.passive_features, self.labels, self.instance_ids):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_active(self) -> int:
        return self.active_features.shape[1]

    @property
    def num_passive(self) -> int:
        return self.passive_features.shape[1]

    @property
    def features(self) -> np.ndarray:
        """Concatenated ``[active | passive]`` matrix (centralized view)."""
        return np.hstack([self.active_features, self.passive_features])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def take(self, rows: np.ndarray) -> VerticalDataset:
        """Row subset; ``num_classes`` is kept even if a class goes missing."""
        return VerticalDataset(
            active_features=self.active_features[rows],
            passive_features=self.passive_features[rows],
            labels=self.labels[rows],
            num_classes=self.num_classes,
            instance_ids=self.instance_ids[rows],
            active_names=self.active_names,
            passive_names=self.passive_names,
        )

    def rows_for_ids(self, ids: Sequence[int]) -> np.ndarray:
        order = np.argsort(self.instance_ids)
        pos = np.searchsorted(self.instance_ids, ids, sorter=order)
        pos = np.clip(pos, 0, len(order) - 1)
        rows = order[pos]
        if not np.array_equal(self.instance_ids[rows], np.asarray(ids)):
            raise DataError("some instance ids are not present in the dataset")
        return rows


@dataclass(frozen=True)
class AttackProbeSet:
    """Class-balanced sample of training instances whose labels the attack tries to infer."""

    probe_ids: np.ndarray
    probe_labels: np.ndarray
    num_classes: int

    @property
    def size(self) -> int:
        return len(self.probe_ids)


def gen_synthetic(
    num_samples: int,
    num_active: int,
    num_passive: int,
    num_classes: int,
    noise: float = 1.0,
    seed: int = 0,
    separation: float = CENTER_SEPARATION,
) -> VerticalDataset:
    """Gaussian blobs centred on distinct vertices of a hypercube.

    Each class gets a random vertex of ``[-s/2, s/2]^F`` (``s`` = ``separation``)
    and its samples are ``center + N(0, noise^2)``. Class sizes differ by at
    most one. The first ``num_active`` columns go to the active party.
    """
    if num_samples < num_classes:
        raise DataError(f"need at least one sample per class: {num_samples} samples < {num_classes} classes")
    if num_active < 1 or num_passive < 1:
        raise DataError("both parties need at least one feature")
    if num_classes < 2:
        raise DataError("num_classes must be >= 2")
    if noise < 0:
        raise DataError("noise must be non-negative")
    n_features = num_active + num_passive
    if n_features >= 63:
        raise DataError("vertex sampling supports at most 62 features")
    if num_classes > 2**n_features:
        raise DataError(f"{n_features} features admit at most {2**n_features} distinct vertices")

    rng = np.random.default_rng(seed)
    vertex_ids = rng.choice(2**n_features, size=num_classes, replace=False)
    bits = (vertex_ids[:, None] >> np.arange(n_features)[None, :]) & 1
    centers = (bits * 2.0 - 1.0) * (separation / 2.0)

    labels = np.arange(num_samples) % num_classes
    rng.shuffle(labels)
    x = centers[labels] + noise * rng.standard_normal((num_samples, n_features))
    return VerticalDataset(
        active_features=x[:, :num_active],
        passive_features=x[:, num_active:],
        labels=labels.astype(np.int64),
        num_classes=num_classes,
        instance_ids=np.arange(num_samples, dtype=np.int64),
    )


def _encode_labels(raw: list[str]) -> tuple[np.ndarray, int]:
    try:
        keys: list = sorted({float(v) for v in raw})
        values: list = [float(v) for v in raw]
    except ValueError:
        keys = sorted(set(raw))
        values = raw
    index = {k: i for i, k in enumerate(keys)}
    return np.array([index[v] for v in values], dtype=np.int64), len(keys)


def load_csv(
    path: str | Path,
    label_column: str,
    passive_columns: Sequence[str],
    id_column: str | None = None,
    num_classes: int | None = None,
) -> VerticalDataset:
    """Read a headered CSV into a two-party dataset.

    Columns that are neither the label, the id column, nor listed in
    ``passive_columns`` are assigned to the active party (possibly none).
    Labels are re-encoded to ``0..C-1`` in sorted order of the raw values,
    unless ``num_classes`` is given, in which case the label cells must
    already be integer class ids below it.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)

    header = [h.strip() for h in header]
    for name in [label_column, *passive_columns] + ([id_column] if id_column else []):
        if name not in header:
            raise DataError(f"{path}: missing column {name!r}")
    if label_column in passive_columns:
        raise DataError(f"{path}: label column {label_column!r} cannot be a passive feature")
    passive = list(passive_columns)
    reserved = {label_column, *passive, *([id_column] if id_column else [])}
    active = [h for h in header if h not in reserved]

    col = {h: i for i, h in enumerate(header)}

    def numeric(names: list[str]) -> np.ndarray:
        out = np.empty((len(rows), len(names)))
        for r, row in enumerate(rows):
            if len(row) != len(header):
                raise DataError(f"{path}:{r + 2}: expected {len(header)} cells, got {len(row)}")
            for c, name in enumerate(names):
                cell = row[col[name]]
                try:
                    out[r, c] = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{r + 2}: non-numeric value {cell!r} in column {name!r}") from None
        return out

    a = numeric(active)
    p = numeric(passive)
    raw_labels = [row[col[label_column]] for row in rows]
    if num_classes is None:
        labels, num_classes = _encode_labels(raw_labels)
        if num_classes < 2:
            raise DataError(f"{path}: label column {label_column!r} has a single class")
    else:
        labels = numeric([label_column])[:, 0].astype(np.int64)
    ids = (
        numeric([id_column])[:, 0].astype(np.int64) if id_column else np.arange(len(rows), dtype=np.int64)
    )
    return VerticalDataset(a, p, labels, num_classes, ids, tuple(active), tuple(passive))


def save_dataset(ds: VerticalDataset, path: str | Path, seed: int | None = None) -> Path:
    """Write ``<path>`` as CSV plus ``<path>.json`` manifest describing column roles."""
    path = Path(path)
    header = ["instance_id", *ds.active_names, *ds.passive_names, "label"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(ds)):
            writer.writerow(
                [int(ds.instance_ids[i])]
                + [repr(float(v)) for v in ds.active_features[i]]
                + [repr(float(v)) for v in ds.passive_features[i]]
                + [int(ds.labels[i])]
            )
    manifest = {
        "id_column": "instance_id",
        "label_column": "label",
        "active_columns": list(ds.active_names),
        "passive_columns": list(ds.passive_names),
        "num_classes": ds.num_classes,
        "seed": seed,
    }
    manifest_path = path.with_name(path.name + ".json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


def load_dataset(path: str | Path) -> VerticalDataset:
    """Inverse of :func:`save_dataset`; labels are taken verbatim as class ids."""
    path = Path(path)
    manifest_path = path.with_name(path.name + ".json")
    if not manifest_path.exists():
        raise DataError(f"{path}: missing manifest {manifest_path.name}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    return load_csv(
        path,
        manifest["label_column"],
        manifest["passive_columns"],
        id_column=manifest["id_column"],
        num_classes=int(manifest["num_classes"]),
    )


def split_train_test(ds: VerticalDataset, train_fraction: float = 2 / 3, seed: int = 0):
    """Shuffled disjoint row split; returns ``(train, test)``."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(ds)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise DataError(f"train_fraction {train_fraction} leaves an empty split for {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    return ds.take(np.sort(perm[:n_train])), ds.take(np.sort(perm[n_train:]))


def sample_balanced_probe(train: VerticalDataset, per_class: int, seed: int = 0) -> AttackProbeSet:
    """Draw exactly ``per_class`` training instances from every class."""
    if per_class < 1:
        raise DataError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    ids, labels = [], []
    for c in range(train.num_classes):
        rows = np.flatnonzero(train.labels == c)
        if len(rows) < per_class:
            raise DataError(f"class {c} has only {len(rows)} training instances, {per_class} requested")
        chosen = np.sort(rng.choice(rows, size=per_class, replace=False))
        ids.append(train.instance_ids[chosen])
        labels.append(np.full(per_class, c, dtype=np.int64))
    return AttackProbeSet(np.concatenate(ids), np.concatenate(labels), train.num_classes)
