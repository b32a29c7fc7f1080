"""Datasets over feature vectors: synthesis, imbalance, target splitting and CSV I/O.

A :class:`Dataset` stores its samples column-wise. Labels that were hidden by
:func:`split_target` live in a separate ``truth`` column; the only sanctioned
way for training code to see samples is :meth:`Dataset.training_view`, which
never touches that column.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional

import numpy as np


class DatasetError(ValueError):
    """Malformed dataset, file or split request."""


class MissingClassError(DatasetError):
    def __init__(self, class_index: int):
        super().__init__(f"class {class_index} has no labeled target sample")
        self.class_index = class_index


class Domain(enum.IntEnum):
    SOURCE = 0
    TARGET = 1


class Split(enum.IntEnum):
    TRAIN = 0
    VAL = 1
    TEST = 2


NO_LABEL = -1


def half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


class Sample(NamedTuple):
    id: int
    features: np.ndarray
    label: Optional[int]
    domain: Domain
    split: Split
    truth: Optional[int] = None


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column store of samples. ``label``/``truth`` use -1 for "absent"."""

    ids: np.ndarray
    features: np.ndarray
    label: np.ndarray
    truth: np.ndarray
    domain: np.ndarray
    split: np.ndarray
    num_classes: int

    def __post_init__(self):
        n = len(self.ids)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise DatasetError("features must be an (n, d) array matching ids")
        if feats.shape[1] < 1:
            raise DatasetError("feature dimension must be >= 1")
        if self.num_classes < 2:
            raise DatasetError("num_classes must be >= 2")
        cols = {
            "ids": np.asarray(self.ids, dtype=np.int64),
            "features": feats,
            "label": np.asarray(self.label, dtype=np.int64),
            "truth": np.asarray(self.truth, dtype=np.int64),
            "domain": np.asarray(self.domain, dtype=np.int8),
            "split": np.asarray(self.split, dtype=np.int8),
        }
        for name, col in cols.items():
            if name != "features" and col.shape != (n,):
                raise DatasetError(f"column {name!r} has shape {col.shape}, expected ({n},)")
            object.__setattr__(self, name, _frozen(col))
        for name in ("label", "truth"):
            col = cols[name]
            if np.any(col >= self.num_classes) or np.any(col < NO_LABEL):
                raise DatasetError(f"{name} outside 0..{self.num_classes - 1}")
        if np.any(cols["ids"] < 0):
            raise DatasetError("sample ids must be non-negative")
        src = cols["domain"] == Domain.SOURCE
        if np.any(cols["label"][src] == NO_LABEL):
            raise DatasetError("every source sample needs a label")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.num_classes == other.num_classes and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("ids", "features", "label", "truth", "domain", "split")
        )

    __hash__ = None

    @property
    def samples(self) -> list[Sample]:
        return list(self)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            lab, tru = int(self.label[i]), int(self.truth[i])
            yield Sample(
                int(self.ids[i]),
                self.features[i],
                None if lab == NO_LABEL else lab,
                Domain(int(self.domain[i])),
                Split(int(self.split[i])),
                None if tru == NO_LABEL else tru,
            )

    def mask(self, domain: Domain, split: Split) -> np.ndarray:
        return (self.domain == domain) & (self.split == split)

    def replace(self, **changes) -> "Dataset":
        cols = dict(
            ids=self.ids, features=self.features, label=self.label, truth=self.truth,
            domain=self.domain, split=self.split, num_classes=self.num_classes,
        )
        cols.update(changes)
        return Dataset(**cols)

    def training_view(self) -> "TrainingView":
        """D^s, D^t and D^u drawn from the train split. Never reads ``truth``."""
        src = np.flatnonzero(self.mask(Domain.SOURCE, Split.TRAIN))
        tgt = self.mask(Domain.TARGET, Split.TRAIN)
        lab = np.flatnonzero(tgt & (self.label != NO_LABEL))
        unl = np.flatnonzero(tgt & (self.label == NO_LABEL))
        val = np.flatnonzero(self.mask(Domain.TARGET, Split.VAL) & (self.label != NO_LABEL))
        return TrainingView(
            source_x=self.features[src],
            source_y=self.label[src],
            labeled_x=self.features[lab],
            labeled_y=self.label[lab],
            unlabeled_x=self.features[unl],
            num_classes=self.num_classes,
            source_ids=self.ids[src],
            labeled_ids=self.ids[lab],
            unlabeled_ids=self.ids[unl],
            target_val_x=self.features[val],
            target_val_y=self.label[val],
        )

    def evaluation_view(self, domain: Domain = Domain.TARGET, split: Split = Split.TEST):
        """Features and ground truth (visible label, else hidden truth) for scoring."""
        idx = np.flatnonzero(self.mask(domain, split))
        y = np.where(self.label[idx] != NO_LABEL, self.label[idx], self.truth[idx])
        if np.any(y == NO_LABEL):
            raise DatasetError(
                f"{domain.name.lower()}/{split.name.lower()} has samples without any ground truth"
            )
        return self.features[idx], y

    def unlabeled_truth(self) -> np.ndarray:
        """Hidden labels of D^u, aligned with ``training_view().unlabeled_x``.

        Evaluation and diagnostics only. Entries are -1 where no truth is stored.
        """
        tgt = self.mask(Domain.TARGET, Split.TRAIN)
        return self.truth[np.flatnonzero(tgt & (self.label == NO_LABEL))]


@dataclass(frozen=True)
class TrainingView:
    source_x: np.ndarray
    source_y: np.ndarray
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    num_classes: int
    source_ids: np.ndarray = field(repr=False, default=None)
    labeled_ids: np.ndarray = field(repr=False, default=None)
    unlabeled_ids: np.ndarray = field(repr=False, default=None)
    # labeled target samples of the val split, for model selection only
    target_val_x: np.ndarray = field(repr=False, default=None)
    target_val_y: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                object.__setattr__(self, name, _frozen(value))

    @property
    def m_s(self) -> int:
        return len(self.source_y)

    @property
    def m_t(self) -> int:
        return len(self.labeled_y)

    @property
    def m_u(self) -> int:
        return len(self.unlabeled_x)


def pareto_counts(n_max: int, num_classes: int, alpha: float) -> np.ndarray:
    """Long-tailed class sizes: ``floor(n_max * rank**-(alpha+1))``, at least 1."""
    if not (isinstance(n_max, (int, np.integer)) and isinstance(num_classes, (int, np.integer))):
        raise ValueError("n_max and num_classes must be integers")
    if num_classes < 1 or n_max < num_classes:
        raise ValueError(f"need n_max >= num_classes >= 1, got n_max={n_max}, C={num_classes}")
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    ranks = np.arange(1, num_classes + 1, dtype=np.float64)
    raw = n_max * ranks ** -(alpha + 1.0)
    # small epsilon keeps exact products (1000 * 2**-2) from flooring one short
    return np.maximum(1, np.floor(raw + 1e-9)).astype(np.int64)


def class_proportions(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=num_classes)[:num_classes]
    missing = np.flatnonzero(counts == 0)
    if len(missing):
        raise MissingClassError(int(missing[0]))
    return counts / counts.sum()


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 3
    dim: int = 2
    n_max: int = 600
    pareto_alpha: float = 1.0
    class_separation: float = 2.0
    noise_sigma: float = 1.0
    rotation_deg: float = 30.0
    shift_scale: float = 2.0
    shift_matrix: Optional[tuple] = None
    shift_offset: Optional[tuple] = None
    train_frac: float = 0.6
    val_frac: float = 0.1
    seed: int = 0

    @classmethod
    def benchmark(cls, seed: int = 0) -> "SynthConfig":
        """3 classes (600/150/66 per domain) on a line in 2-D, 30 degree rotation plus 2-sigma shift."""
        return cls(seed=seed)

    def validate(self):
        if self.num_classes < 2:
            raise DatasetError("num_classes must be >= 2")
        if self.dim < 1:
            raise DatasetError("dim must be >= 1")
        if self.n_max < self.num_classes:
            raise DatasetError("n_max must be >= num_classes")
        for name in ("pareto_alpha", "class_separation", "noise_sigma"):
            if not getattr(self, name) > 0:
                raise DatasetError(f"{name} must be > 0")
        if not (0 < self.train_frac <= 1 and 0 <= self.val_frac and self.train_frac + self.val_frac <= 1):
            raise DatasetError("need 0 < train_frac and train_frac + val_frac <= 1")
        if self.seed < 0:
            raise DatasetError("seed must be unsigned")
        a, b = self.domain_shift()
        if a.shape != (self.dim, self.dim) or b.shape != (self.dim,):
            raise DatasetError("domain shift has wrong shape")
        if not np.isfinite(np.linalg.cond(a)) or np.linalg.cond(a) >= 1e6:
            raise DatasetError("domain shift matrix is singular or ill-conditioned")

    def domain_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """(matrix, offset) mapping source-process draws to the target domain."""
        d = self.dim
        if self.shift_matrix is not None:
            a = np.asarray(self.shift_matrix, dtype=np.float64).reshape(d, d)
        else:
            a = np.eye(d)
            if d >= 2:
                t = math.radians(self.rotation_deg)
                a[:2, :2] = [[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]]
        if self.shift_offset is not None:
            b = np.asarray(self.shift_offset, dtype=np.float64).reshape(d)
        else:
            b = np.full(d, self.shift_scale * self.noise_sigma / math.sqrt(d))
        return a, b

    def class_means(self) -> np.ndarray:
        c, d = self.num_classes, self.dim
        means = np.zeros((c, d))
        if d >= c:
            # simplex corners: every pair of means is class_separation apart
            means[np.arange(c), np.arange(c)] = self.class_separation / math.sqrt(2.0)
        else:
            means[:, 0] = self.class_separation * np.arange(c)
        return means


def _split_sizes(n: int, train_frac: float, val_frac: float) -> tuple[int, int]:
    n_train = min(n, max(1, half_up(train_frac * n)))
    n_val = min(n - n_train, half_up(val_frac * n))
    return n_train, n_val


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Shifted isotropic Gaussian classes with Pareto class sizes in both domains."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    counts = pareto_counts(cfg.n_max, cfg.num_classes, cfg.pareto_alpha)
    means = cfg.class_means()
    a, b = cfg.domain_shift()

    feats, labels, domains, splits = [], [], [], []
    for dom in (Domain.SOURCE, Domain.TARGET):
        for c, n in enumerate(counts):
            x = means[c] + cfg.noise_sigma * rng.standard_normal((n, cfg.dim))
            if dom == Domain.TARGET:
                x = x @ a.T + b
            n_train, n_val = _split_sizes(int(n), cfg.train_frac, cfg.val_frac)
            sp = np.full(n, Split.TEST, dtype=np.int8)
            order = rng.permutation(n)
            sp[order[:n_train]] = Split.TRAIN
            sp[order[n_train:n_train + n_val]] = Split.VAL
            feats.append(x)
            labels.append(np.full(n, c))
            domains.append(np.full(n, dom, dtype=np.int8))
            splits.append(sp)

    total = int(2 * counts.sum())
    return Dataset(
        ids=np.arange(total),
        features=np.vstack(feats),
        label=np.concatenate(labels),
        truth=np.full(total, NO_LABEL),
        domain=np.concatenate(domains),
        split=np.concatenate(splits),
        num_classes=cfg.num_classes,
    )


def _stratified_quota(counts: np.ndarray, n_pick: int) -> np.ndarray:
    """One per class, the remainder split by largest remainder in proportion to ``counts``."""
    quota = np.ones_like(counts)
    extra = n_pick - len(counts)
    if extra > 0:
        share = extra * counts / counts.sum()
        add = np.floor(share).astype(np.int64)
        rest = extra - add.sum()
        order = np.lexsort((np.arange(len(counts)), -(share - add)))
        add[order[:rest]] += 1
        quota += add
    # an over-full class hands its excess to the next class with room
    over = np.maximum(quota - counts, 0).sum()
    quota = np.minimum(quota, counts)
    for c in np.argsort(-counts, kind="stable"):
        if over == 0:
            break
        room = counts[c] - quota[c]
        take = min(room, over)
        quota[c] += take
        over -= take
    return quota


def split_target(ds: Dataset, labeled_fraction: float, seed: int) -> Dataset:
    """Keep labels on a stratified subset of target-train samples and hide the rest.

    Hidden labels move into ``truth``. Labels already hidden are taken from
    ``truth`` so a dataset can be re-split.
    """
    if not 0 < labeled_fraction < 1:
        raise DatasetError(f"labeled_fraction must be in (0, 1), got {labeled_fraction}")
    idx = np.flatnonzero(ds.mask(Domain.TARGET, Split.TRAIN))
    if len(idx) == 0:
        raise DatasetError("target train set is empty")
    y = np.where(ds.label[idx] != NO_LABEL, ds.label[idx], ds.truth[idx])
    if np.any(y == NO_LABEL):
        raise DatasetError("target train samples without label or truth cannot be split")
    counts = np.bincount(y, minlength=ds.num_classes)
    if np.any(counts == 0):
        raise MissingClassError(int(np.flatnonzero(counts == 0)[0]))

    n_pick = max(ds.num_classes, half_up(labeled_fraction * len(idx)))
    quota = _stratified_quota(counts, n_pick)
    rng = np.random.default_rng(seed)
    keep = np.zeros(len(idx), dtype=bool)
    for c in range(ds.num_classes):
        members = np.flatnonzero(y == c)
        keep[rng.choice(members, size=int(quota[c]), replace=False)] = True

    label = ds.label.copy()
    truth = ds.truth.copy()
    label[idx] = np.where(keep, y, NO_LABEL)
    truth[idx] = np.where(keep, NO_LABEL, y)
    return ds.replace(label=label, truth=truth)


_DOMAIN_NAMES = {Domain.SOURCE: "source", Domain.TARGET: "target"}
_SPLIT_NAMES = {Split.TRAIN: "train", Split.VAL: "val", Split.TEST: "test"}


def save_dataset(ds: Dataset, path) -> None:
    header = ["id", "domain", "split", "label", "truth"] + [f"f{j}" for j in range(ds.dim)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            lab, tru = int(ds.label[i]), int(ds.truth[i])
            w.writerow(
                [int(ds.ids[i]), _DOMAIN_NAMES[Domain(int(ds.domain[i]))],
                 _SPLIT_NAMES[Split(int(ds.split[i]))],
                 "" if lab == NO_LABEL else lab, "" if tru == NO_LABEL else tru]
                + [repr(float(v)) for v in ds.features[i]]
            )


def load_dataset(path, num_classes: Optional[int] = None) -> Dataset:
    """Read the CSV schema ``id,domain,split,label,truth,f0..f{d-1}``.

    The ``truth`` column may be left out of the header entirely, in which case
    no hidden labels are stored. ``num_classes`` defaults to one more than the
    largest label or truth seen.
    """
    domains = {v: k for k, v in _DOMAIN_NAMES.items()}
    splits = {v: k for k, v in _SPLIT_NAMES.items()}
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = csv.reader(fh)
        try:
            header = next(rows)
        except StopIteration:
            raise DatasetError(f"{path}: empty file, header required") from None
        if header[:4] != ["id", "domain", "split", "label"]:
            raise DatasetError(f"{path}:1: header must start with id,domain,split,label,truth")
        has_truth = len(header) > 4 and header[4] == "truth"
        lead = 5 if has_truth else 4
        d = len(header) - lead
        if d < 1 or header[lead:] != [f"f{j}" for j in range(d)]:
            raise DatasetError(f"{path}:1: feature columns must be named f0..f{{d-1}}")

        ids, feats, labs, truths, doms, sps = [], [], [], [], [], []
        for row in rows:
            line = rows.line_num
            if not row:
                continue
            if len(row) != lead + d:
                raise DatasetError(
                    f"{path}:{line}: row has {len(row) - lead} features, expected d={d}"
                )
            try:
                ids.append(int(row[0]))
                doms.append(domains[row[1]])
                sps.append(splits[row[2]])
                labs.append(int(row[3]) if row[3] != "" else NO_LABEL)
                truths.append(int(row[4]) if has_truth and row[4] != "" else NO_LABEL)
                feats.append([float(v) for v in row[lead:]])
            except (ValueError, KeyError) as exc:
                raise DatasetError(f"{path}:{line}: cannot parse row ({exc})") from None
    if not ids:
        raise DatasetError(f"{path}: no samples")
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{path}: duplicate sample ids")
    if num_classes is None:
        num_classes = max(2, max(max(labs), max(truths)) + 1)
    return Dataset(
        ids=np.array(ids), features=np.array(feats, dtype=np.float64).reshape(len(ids), d),
        label=np.array(labs), truth=np.array(truths), domain=np.array(doms),
        split=np.array(sps), num_classes=num_classes,
    )
