"""Source pretraining, the S+T baseline and cluster-guided adaptation.

Adaptation repeats three steps per round: embed the target-train samples,
cluster them with :func:`~clusterda.wsclust.weakly_supervised_clustering`,
then train on cross-entropy over D^s and D^t plus ``lam`` times the triplet
hinge on (labeled anchor, unlabeled same-cluster positive, unlabeled
other-cluster negative). Validation mDice after every round drives early
stopping and the returned model is the best snapshot.

S+T runs the same loop with the triplet term switched off, so ``lam=0``
adaptation and S+T follow identical trajectories.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np

from . import nnkit
from .data import Dataset, TrainingView, class_proportions, half_up
from .metrics import evaluate, purity
from .nnkit import SGD, Model
from .wsclust import Clustering, WscConfig, weakly_supervised_clustering

# independent RNG streams per purpose
_STREAM_PRETRAIN, _STREAM_BATCH, _STREAM_TRIPLET, _STREAM_VAL = 0, 1, 2, 3


VALIDATION_SOURCES = ("auto", "dt", "target-val")


class NoEligibleCluster(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 1.0
    lam: float = 1.0
    learning_rate: float = 1e-2
    momentum: float = 0.9
    batch_size_ce: int = 32
    triplets_per_step: int = 32
    epochs_per_round: int = 5
    pretrain_multiplier: int = 4
    hidden: tuple = (64,)
    embed_dim: int = 32
    seed: int = 0


@dataclass(frozen=True)
class AdaptConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    wsc: WscConfig = field(default_factory=WscConfig)
    max_rounds: int = 50
    patience: int = 5
    val_fraction_of_dt: float = 0.5
    source_holdout_fraction: float = 0.1
    validation: str = "auto"
    stage: str = "full"

    def __post_init__(self):
        if self.validation not in VALIDATION_SOURCES:
            raise ValueError(f"validation must be one of {VALIDATION_SOURCES}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _view(data: Union[Dataset, TrainingView]) -> TrainingView:
    return data.training_view() if isinstance(data, Dataset) else data


def _ce_epoch(model, opt, x, y, batch_size, rng, triplet_step=None):
    """One shuffled pass over (x, y). Returns model and mean CE / triplet losses."""
    order = rng.permutation(len(y))
    ce, tl = [], []
    for start in range(0, len(y), batch_size):
        b = order[start:start + batch_size]
        loss, grads = nnkit.cross_entropy(model, x[b], y[b])
        ce.append(loss)
        if triplet_step is not None:
            t_loss, grads = triplet_step(model, grads)
            tl.append(t_loss)
        model = opt.step(model, grads)
    return model, float(np.mean(ce)), (float(np.mean(tl)) if tl else None)


def pretrain_source(model: Model, source, cfg: TrainConfig = TrainConfig()) -> tuple[Model, list[float]]:
    """Cross-entropy on D^s for ``epochs_per_round * pretrain_multiplier`` epochs.

    ``source`` is a Dataset, a TrainingView or an ``(x, y)`` pair. Returns the
    trained model and the per-epoch mean loss.
    """
    if isinstance(source, tuple):
        x, y = source
    else:
        v = _view(source)
        x, y = v.source_x, v.source_y
    if len(y) == 0:
        raise ValueError("D^s is empty")
    rng = _rng(cfg.seed, _STREAM_PRETRAIN)
    opt = SGD(cfg.learning_rate, cfg.momentum)
    curve = []
    for _ in range(cfg.epochs_per_round * cfg.pretrain_multiplier):
        model, loss, _ = _ce_epoch(model, opt, x, y, cfg.batch_size_ce, rng)
        curve.append(loss)
    return model, curve


class Triplet(NamedTuple):
    anchor: int    # index into D^t
    positive: int  # index into D^u
    negative: int  # index into D^u


class TripletMiner:
    """Samples triplets from a clustering of ``[D^t; D^u]`` (labeled rows first).

    Eligible clusters hold at least one labeled and one unlabeled sample, with
    at least one unlabeled sample elsewhere. A cluster is drawn uniformly, then
    anchor, positive and negative uniformly within their pools.
    """

    def __init__(self, clustering: Clustering, m_t: int):
        assign = np.asarray(clustering.assignment)
        lab_assign, unl_assign = assign[:m_t], assign[m_t:]
        self.pools = []
        for j in range(clustering.k):
            anchors = np.flatnonzero(lab_assign == j)
            pos = np.flatnonzero(unl_assign == j)
            neg = np.flatnonzero(unl_assign != j)
            if len(anchors) and len(pos) and len(neg):
                self.pools.append((anchors, pos, neg))
        if not self.pools:
            raise NoEligibleCluster("no cluster holds both labeled and unlabeled samples with negatives outside")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``(n, 3)`` integer array of (anchor, positive, negative)."""
        which = rng.integers(len(self.pools), size=n)
        u = rng.random((n, 3))
        out = np.empty((n, 3), dtype=np.int64)
        for t in range(n):
            for col, pool in enumerate(self.pools[which[t]]):
                out[t, col] = pool[int(u[t, col] * len(pool))]
        return out


def mine_triplets(clustering: Clustering, m_t: int, n: int, rng: np.random.Generator) -> list[Triplet]:
    """``n`` triplets from a clustering whose first ``m_t`` rows are D^t and the rest D^u."""
    return [Triplet(*map(int, row)) for row in TripletMiner(clustering, m_t).sample(n, rng)]


@dataclass
class RoundRecord:
    round: int
    loss_ce: float
    loss_triplet: Optional[float]
    val_mdice: float
    best_val_mdice: float
    k: Optional[int] = None
    purity: Optional[float] = None
    minority_purity: Optional[float] = None


# diagnostics computed from hidden truth; excluded from the trajectory hash
_DIAGNOSTIC_FIELDS = ("purity", "minority_purity")


@dataclass
class RunHistory:
    method: str
    records: list = field(default_factory=list)
    best_round: int = 0
    stop_round: int = 0
    validation: str = ""
    pretrain_curve: list = field(default_factory=list)

    @property
    def best_val_mdice(self) -> float:
        return max((r.val_mdice for r in self.records), default=float("nan"))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "best_round": self.best_round,
            "stop_round": self.stop_round,
            "validation": self.validation,
            "pretrain_curve": self.pretrain_curve,
            "rounds": [asdict(r) for r in self.records],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["round", "loss_ce", "loss_triplet", "val_mdice", "k", "purity"]
        w.writerow(cols)
        for r in self.records:
            w.writerow(["" if getattr(r, c) is None else repr(getattr(r, c)) if isinstance(getattr(r, c), float)
                        else getattr(r, c) for c in cols])
        return buf.getvalue()

    def trajectory_hash(self) -> str:
        """SHA-256 of everything training produced, leaving out truth-based diagnostics."""
        d = self.to_dict()
        for r in d["rounds"]:
            for k in _DIAGNOSTIC_FIELDS:
                r.pop(k, None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _stratified_take(y: np.ndarray, per_class, rng) -> np.ndarray:
    take = np.zeros(len(y), dtype=bool)
    for c, n in per_class.items():
        members = np.flatnonzero(y == c)
        if n > 0:
            take[rng.choice(members, size=n, replace=False)] = True
    return take


def split_validation(view: TrainingView, cfg: AdaptConfig):
    """Pick the validation set.

    ``"target-val"`` uses the labeled target val split as is. ``"dt"`` carves
    a stratified share out of D^t, falling back to a stratified source holdout
    when some class has fewer than two labeled target samples. ``"auto"`` is
    ``"target-val"`` when that split has labeled samples, else ``"dt"``.
    Returns ``(source_x, source_y, labeled_x, labeled_y, val_x, val_y, kind)``.
    """
    has_val = view.target_val_y is not None and len(view.target_val_y) > 0
    if cfg.validation == "target-val" or (cfg.validation == "auto" and has_val):
        if view.target_val_y is None or len(view.target_val_y) == 0:
            raise ValueError("validation='target-val' needs labeled target samples in the val split")
        return (view.source_x, view.source_y, view.labeled_x, view.labeled_y,
                view.target_val_x, view.target_val_y, "target-val")
    rng = _rng(cfg.train.seed, _STREAM_VAL)
    c = view.num_classes
    counts_t = np.bincount(view.labeled_y, minlength=c)
    if cfg.val_fraction_of_dt > 0 and np.all(counts_t >= 2):
        per = {k: min(int(counts_t[k]) - 1, max(1, half_up(cfg.val_fraction_of_dt * counts_t[k])))
               for k in range(c)}
        take = _stratified_take(view.labeled_y, per, rng)
        return (view.source_x, view.source_y, view.labeled_x[~take], view.labeled_y[~take],
                view.labeled_x[take], view.labeled_y[take], "target")
    counts_s = np.bincount(view.source_y, minlength=c)
    per = {k: (max(1, half_up(cfg.source_holdout_fraction * counts_s[k])) if counts_s[k] >= 2 else 0)
           for k in range(c)}
    take = _stratified_take(view.source_y, per, rng)
    return (view.source_x[~take], view.source_y[~take], view.labeled_x, view.labeled_y,
            view.source_x[take], view.source_y[take], "source-holdout")


def _val_mdice(model, x, y, num_classes) -> float:
    return evaluate(nnkit.predict(model, x), y, num_classes).mdice


def _train_rounds(model: Model, data, cfg: AdaptConfig, use_triplets: bool, method: str,
                  truth: Optional[np.ndarray] = None, history: Optional[RunHistory] = None,
                  on_round=None):
    view = _view(data)
    if view.m_s == 0 or view.m_t == 0:
        raise ValueError("both D^s and D^t must be non-empty")
    tc = cfg.train
    sx, sy, tx, ty, vx, vy, kind = split_validation(view, cfg)
    ce_x = np.vstack([sx, tx])
    ce_y = np.concatenate([sy, ty])
    # clustering runs over [D^t (minus validation); D^u]
    target_x = np.vstack([tx, view.unlabeled_x])
    target_labels = np.concatenate([ty, np.full(view.m_u, -1)])
    diag_truth = None
    if truth is not None and len(truth) == view.m_u and np.all(truth >= 0):
        diag_truth = np.concatenate([ty, truth])
    if use_triplets:
        proportions = class_proportions(ty, view.num_classes)

    history = history if history is not None else RunHistory(method)
    history.validation = kind
    batch_rng = _rng(tc.seed, _STREAM_BATCH)
    trip_rng = _rng(tc.seed, _STREAM_TRIPLET)
    opt = SGD(tc.learning_rate, tc.momentum)
    best_val, best_model, since = -np.inf, model, 0
    try:
        for rnd in range(1, cfg.max_rounds + 1):
            step = None
            k = pur = min_pur = None
            if use_triplets:
                emb = nnkit.embed(model, target_x)
                wcfg = WscConfig(cfg.wsc.K, cfg.wsc.must_penalty, cfg.wsc.kmeans_max_iter,
                                 cfg.wsc.kmeans_restarts, cfg.wsc.tol, seed=cfg.wsc.seed * 10_007 + rnd)
                clustering = weakly_supervised_clustering(emb, target_labels, proportions, view.m_u, wcfg, cfg.stage)
                k = clustering.k
                if diag_truth is not None:
                    pur, per_class = purity(clustering.assignment, diag_truth, view.num_classes)
                    minor = int(np.argmin(np.bincount(diag_truth, minlength=view.num_classes)))
                    # NaN when no cluster has the minority class as its majority
                    min_pur = None if np.isnan(per_class[minor]) else float(per_class[minor])
                try:
                    miner = TripletMiner(clustering, len(ty))
                except NoEligibleCluster:
                    miner = None
                if miner is not None:
                    def step(m, grads, miner=miner):
                        trip = miner.sample(tc.triplets_per_step, trip_rng)
                        loss, tg = nnkit.triplet_backward(
                            m, target_x[trip[:, 0]], target_x[trip[:, 1]], target_x[trip[:, 2]], tc.margin)
                        return loss, nnkit.add_scaled(grads, tg, tc.lam)

            ce_losses, t_losses = [], []
            for _ in range(tc.epochs_per_round):
                model, ce, tl = _ce_epoch(model, opt, ce_x, ce_y, tc.batch_size_ce, batch_rng, step)
                ce_losses.append(ce)
                if tl is not None:
                    t_losses.append(tl)

            val = _val_mdice(model, vx, vy, view.num_classes)
            if val > best_val:
                best_val, best_model, since = val, model, 0
                history.best_round = rnd
            else:
                since += 1
            history.records.append(RoundRecord(
                rnd, float(np.mean(ce_losses)), float(np.mean(t_losses)) if t_losses else None,
                float(val), float(best_val), k, pur, min_pur,
            ))
            history.stop_round = rnd
            if on_round is not None:
                on_round(rnd, model)
            if since >= cfg.patience:
                break
    except Exception as exc:
        # callers still get the rounds completed before the failure
        exc.history = history
        raise
    return best_model, history


def train_s_plus_t(model: Model, data, cfg: AdaptConfig = AdaptConfig()) -> tuple[Model, RunHistory]:
    """Cross-entropy fine-tuning on D^s and D^t with the adaptation schedule."""
    return _train_rounds(model, data, cfg, use_triplets=False, method="s+t")


def adapt(model: Model, data, cfg: AdaptConfig = AdaptConfig(),
          truth: Optional[np.ndarray] = None) -> tuple[Model, RunHistory]:
    """Cluster-guided adaptation of a pretrained model.

    ``data`` is a Dataset or TrainingView. ``truth`` (hidden labels of D^u,
    aligned with the view) only feeds the purity diagnostics in the history;
    when ``data`` is a Dataset it is read from the evaluation-only column.
    Setting ``cfg.train.lam`` to 0 reduces this to :func:`train_s_plus_t`.
    """
    if truth is None and isinstance(data, Dataset):
        truth = data.unlabeled_truth()
    use = cfg.train.lam > 0
    return _train_rounds(model, data, cfg, use_triplets=use, method="adapt", truth=truth)


def evaluate_model(model: Model, ds: Dataset, domain=None, split=None):
    from .data import Domain, Split

    x, y = ds.evaluation_view(domain or Domain.TARGET, split or Split.TEST)
    return evaluate(nnkit.predict(model, x), y, ds.num_classes)
