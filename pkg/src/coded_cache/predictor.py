"""Online request forecasting with clustered LSTMs.

Slots are 0-based here: the feature for slot ``t`` holds the ``rho`` counts of
slots ``t - rho .. t - 1``, so the first predictable slot is ``t = rho``.
"""
from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor_nn import Adam, lstm_regressor
from .trace import DemandTrace

log = logging.getLogger(__name__)

METHODS = ("clstm", "lstm", "last_value")


@dataclass
class FeatureVector:
    raw: np.ndarray
    scale: float
    normalized: np.ndarray


def normalize_window(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``(normalized, scale)`` for a ``(files, rho)`` window block.

    All-zero rows get scale 1 and stay zero.
    """
    raw = np.asarray(raw, dtype=float)
    scale = raw.max(axis=-1)
    scale = np.where(scale > 0, scale, 1.0)
    return raw / scale[..., None], scale


def make_feature(counts: np.ndarray | DemandTrace, file: int, slot: int, rho: int) -> FeatureVector:
    agg = counts.aggregate if isinstance(counts, DemandTrace) else np.asarray(counts)
    if slot < rho or slot > agg.shape[0]:
        raise IndexError(f"slot {slot} has no full window of {rho} past counts")
    raw = agg[slot - rho : slot, file].astype(float)
    norm, scale = normalize_window(raw[None])
    return FeatureVector(raw, float(scale[0]), norm[0])


@dataclass
class ClusterModel:
    centers: np.ndarray  # (C, rho)
    counts: np.ndarray  # (C,) accumulated members S_i

    @property
    def n_clusters(self) -> int:
        return len(self.centers)


def init_centers_kmeanspp(features: np.ndarray, n_clusters: int, rng_seed=None) -> ClusterModel:
    """k-means++ seeding: D^2-weighted draws after a uniform first pick."""
    features = np.asarray(features, dtype=float)
    F = len(features)
    if n_clusters > F or n_clusters < 1:
        raise ValueError(f"cannot seed {n_clusters} centres from {F} features")
    rng = np.random.default_rng(rng_seed)
    chosen = [int(rng.integers(F))]
    d2 = np.sum((features - features[chosen[0]]) ** 2, axis=1)
    for _ in range(1, n_clusters):
        total = d2.sum()
        if total <= 0:
            # every remaining feature coincides with a centre
            rest = np.setdiff1d(np.arange(F), chosen)
            idx = int(rng.choice(rest))
        else:
            idx = int(rng.choice(F, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((features - features[idx]) ** 2, axis=1))
    return ClusterModel(features[chosen].copy(), np.zeros(n_clusters, dtype=np.int64))


def assign_clusters(model: ClusterModel, features: np.ndarray) -> np.ndarray:
    d2 = ((features[:, None, :] - model.centers[None]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def assign_cluster(model: ClusterModel, feature: np.ndarray) -> int:
    return int(assign_clusters(model, np.asarray(feature, dtype=float)[None])[0])


def update_center(model: ClusterModel, cluster: int, members: np.ndarray) -> ClusterModel:
    """Running-mean centre update with this slot's members."""
    members = np.asarray(members, dtype=float).reshape(-1, model.centers.shape[1])
    n = len(members)
    if n == 0:
        return model
    s = model.counts[cluster]
    model.centers[cluster] = (model.centers[cluster] * s + members.sum(axis=0)) / (s + n)
    model.counts[cluster] = s + n
    return model


class LstmBank:
    """One LSTM forecaster and FIFO replay buffer per group.

    The networks are stacked on a leading group axis so every group runs in a
    single batched pass; each keeps its own weights, Adam moments and buffer.
    """

    def __init__(self, n_groups, rho, hidden=(24, 24, 12), buffer_size=1000, batch_size=32, lr=5e-4, rng_seed=None):
        ss = np.random.SeedSequence(rng_seed)
        init_seed, sample_seed = ss.spawn(2)
        self.n_groups = n_groups
        self.rho = rho
        self.net = lstm_regressor(1, hidden, rng=np.random.default_rng(init_seed), groups=n_groups)
        self.opt = Adam(self.net.parameters(), lr=lr)
        self.buffers: list[deque] = [deque(maxlen=buffer_size) for _ in range(n_groups)]
        self.batch_size = batch_size
        self.rng = np.random.default_rng(sample_seed)
        self.skipped_steps = 0

    def outputs(self, groups: np.ndarray, normalized: np.ndarray) -> np.ndarray:
        """Raw outputs for windows ``normalized[i]`` routed to net ``groups[i]``."""
        groups = np.asarray(groups, dtype=np.int64)
        normalized = np.asarray(normalized, dtype=float)
        n = len(groups)
        if n == 0:
            return np.zeros(0)
        order = np.argsort(groups, kind="stable")
        sizes = np.bincount(groups, minlength=self.n_groups)
        slot = np.arange(n) - np.repeat(np.cumsum(sizes) - sizes, sizes)
        x = np.zeros((self.n_groups, int(sizes.max()), normalized.shape[1], 1))
        x[groups[order], slot, :, 0] = normalized[order]
        y = self.net.forward(x)[..., 0]
        out = np.empty(n)
        out[order] = y[groups[order], slot]
        return out

    def output(self, group: int, normalized: np.ndarray) -> np.ndarray:
        """Raw network output for a ``(batch, rho)`` block routed to one group."""
        normalized = np.atleast_2d(np.asarray(normalized, dtype=float))
        return self.outputs(np.full(len(normalized), group), normalized)

    def add(self, group: int, normalized: np.ndarray, target: float) -> None:
        self.buffers[group].append((np.asarray(normalized, dtype=float), float(target)))

    def train_groups(self, groups) -> np.ndarray:
        """One Adam step for each listed group on its own uniform minibatch.

        Returns the pre-step loss per group (NaN where the buffer was empty).
        """
        losses = np.full(self.n_groups, np.nan)
        active = np.zeros(self.n_groups, dtype=bool)
        B = self.batch_size
        x = np.zeros((self.n_groups, B, self.rho, 1))
        y = np.zeros((self.n_groups, B, 1))
        mask = np.zeros((self.n_groups, B, 1))
        for g in np.unique(np.asarray(groups, dtype=np.int64)):
            buf = self.buffers[g]
            if not buf:
                self.skipped_steps += 1
                log.debug("group %d: empty replay buffer, training skipped", g)
                continue
            n = min(B, len(buf))
            idx = self.rng.choice(len(buf), size=n, replace=False)
            x[g, :n, :, 0] = [buf[i][0] for i in idx]
            y[g, :n, 0] = [buf[i][1] for i in idx]
            mask[g, :n] = 1.0 / n
            active[g] = True
        if not active.any():
            return losses
        out = self.net.forward(x)
        err = out - y
        self.net.backward(2.0 * err * mask)
        self.opt.step(self.net.gradients(), active=active)
        sq = (err**2 * mask).sum(axis=(1, 2))
        losses[active] = sq[active]
        return losses

    def train_step(self, group: int) -> float | None:
        """One Adam step for a single group; returns the pre-step loss."""
        loss = self.train_groups([group])[group]
        return None if np.isnan(loss) else float(loss)


def predict(bank: LstmBank, group: int, feature: FeatureVector) -> float:
    """Scaled, non-negative forecast for one file."""
    if not np.any(feature.raw):
        return 0.0
    out = bank.output(group, feature.normalized[None])[0]
    return max(0.0, feature.scale * float(out))


def nmse(predicted, actual) -> float:
    """``||pred - actual||^2 / ||actual||^2``; NaN when ``actual`` is all zero."""
    predicted, actual = np.asarray(predicted, float), np.asarray(actual, float)
    denom = float(np.dot(actual, actual))
    if denom == 0.0:
        return float("nan")
    diff = predicted - actual
    return float(np.dot(diff, diff)) / denom


@dataclass
class PredictorConfig:
    method: str = "clstm"
    rho: int = 12
    n_clusters: int = 4
    buffer_size: int = 1000
    batch_size: int = 32
    lr: float = 5e-4
    hidden: tuple[int, ...] = (24, 24, 12)
    seed: int = 0


@dataclass
class PredictionRun:
    predictions: np.ndarray  # (T, F), NaN before the first predictable slot
    clusters: np.ndarray  # (T, F), -1 where undefined
    nmse: np.ndarray  # (T,), NaN where undefined
    start: int
    cluster_counts: list[np.ndarray] = field(default_factory=list)
    skipped_nmse_slots: int = 0

    @property
    def running_avg_nmse(self) -> np.ndarray:
        out = np.full_like(self.nmse, np.nan)
        total, n = 0.0, 0
        for t in range(self.start, len(self.nmse)):
            if not np.isnan(self.nmse[t]):
                total += self.nmse[t]
                n += 1
            out[t] = total / n if n else np.nan
        return out

    @property
    def average_nmse(self) -> float:
        vals = self.nmse[self.start :]
        return float(np.nanmean(vals)) if np.any(~np.isnan(vals)) else float("nan")


def run_online(trace: DemandTrace | np.ndarray, config: PredictorConfig = PredictorConfig()) -> PredictionRun:
    """Predict every slot from ``rho`` on, learning online after each slot.

    ``clstm`` clusters the normalised windows and trains one LSTM per
    cluster; ``lstm`` trains one LSTM per file; ``last_value`` repeats the
    previous count.
    """
    if config.method not in METHODS:
        raise ValueError(f"unknown method {config.method!r}")
    agg = (trace.aggregate if isinstance(trace, DemandTrace) else np.asarray(trace)).astype(float)
    T, F = agg.shape
    rho = config.rho
    if T <= rho:
        raise ValueError(f"trace of {T} slots is too short for rho={rho}")
    preds = np.full((T, F), np.nan)
    clusters = np.full((T, F), -1, dtype=np.int64)
    errs = np.full(T, np.nan)
    counts_log: list[np.ndarray] = []

    ss = np.random.SeedSequence(config.seed)
    seed_km, seed_bank = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    model = None
    bank = None
    if config.method == "clstm":
        bank = LstmBank(config.n_clusters, rho, config.hidden, config.buffer_size, config.batch_size, config.lr, seed_bank)
    elif config.method == "lstm":
        bank = LstmBank(F, rho, config.hidden, config.buffer_size, config.batch_size, config.lr, seed_bank)

    skipped = 0
    for t in range(rho, T):
        raw = agg[t - rho : t].T  # (F, rho)
        norm, scale = normalize_window(raw)
        active = raw.any(axis=1)
        # phase 1: forecast
        if config.method == "last_value":
            preds[t] = agg[t - 1]
        else:
            if config.method == "clstm":
                if model is None:
                    model = init_centers_kmeanspp(norm, config.n_clusters, seed_km)
                groups = assign_clusters(model, norm)
            else:
                groups = np.arange(F)
            clusters[t] = groups
            out = bank.outputs(groups, norm)
            preds[t] = np.where(active, np.maximum(scale * out, 0.0), 0.0)
        errs[t] = nmse(preds[t], agg[t])
        skipped += int(np.isnan(errs[t]))
        # phase 2: learn from the revealed counts
        if bank is not None:
            targets = agg[t] / scale
            if model is not None:
                for g in range(model.n_clusters):
                    update_center(model, g, norm[groups == g])
                counts_log.append(model.counts.copy())
            # all-zero windows are forecast as zero without a network, so they
            # are not replayed either
            for f in np.flatnonzero(active):
                bank.add(int(groups[f]), norm[f], targets[f])
            bank.train_groups(groups[active])
    if skipped:
        log.info("%d slots with zero total demand excluded from NMSE", skipped)
    return PredictionRun(preds, clusters, errs, rho, counts_log, skipped)


def write_prediction_log(run: PredictionRun, actual: np.ndarray, path: str | Path, file_ids=None) -> None:
    T, F = run.predictions.shape
    ids = np.arange(F) if file_ids is None else file_ids
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "file_id", "predicted", "actual", "cluster"])
        for t in range(run.start, T):
            for f in range(F):
                w.writerow([t, int(ids[f]), repr(float(run.predictions[t, f])), int(actual[t, f]), int(run.clusters[t, f])])


def write_nmse_log(run: PredictionRun, path: str | Path) -> None:
    ravg = run.running_avg_nmse
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "nmse", "running_avg_nmse"])
        for t in range(run.start, len(run.nmse)):
            w.writerow([t, repr(float(run.nmse[t])), repr(float(ravg[t]))])
