"""Request traces: CSV interchange, filtering, per-user allocation, synthesis."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class TraceParseError(ValueError):
    pass


@dataclass
class DemandTrace:
    aggregate: np.ndarray  # (T, F) int counts d_f(t)
    per_user: np.ndarray | None = None  # (T, K, F)
    file_ids: np.ndarray | None = None  # original ids of the F columns
    patterns: np.ndarray | None = None  # latent pattern per file (synthetic only)

    def __post_init__(self):
        self.aggregate = np.asarray(self.aggregate, dtype=np.int64)
        if self.aggregate.ndim != 2:
            raise ValueError("aggregate counts must be a (slots, files) matrix")
        if np.any(self.aggregate < 0):
            raise ValueError("request counts must be non-negative")
        if self.file_ids is None:
            self.file_ids = np.arange(self.files)
        if self.per_user is not None:
            self.per_user = np.asarray(self.per_user, dtype=np.int64)
            if not np.array_equal(self.per_user.sum(axis=1), self.aggregate):
                raise ValueError("per-user counts do not sum to the aggregate")

    @property
    def slots(self) -> int:
        return self.aggregate.shape[0]

    @property
    def files(self) -> int:
        return self.aggregate.shape[1]

    @property
    def users(self) -> int:
        return 0 if self.per_user is None else self.per_user.shape[1]


def load_trace(csv_path: str | Path) -> DemandTrace:
    """Read an aggregate ``slot,file_id,count`` CSV into a dense trace.

    Missing (slot, file) pairs count as zero. Slots must be 0-based and
    contiguous; file ids may be arbitrary non-negative integers and are kept
    in ascending order.
    """
    rows: list[tuple[int, int, int]] = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return DemandTrace(np.zeros((0, 0), dtype=np.int64))
        if [h.strip() for h in header] != ["slot", "file_id", "count"]:
            raise TraceParseError(f"line 1: expected header slot,file_id,count, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise TraceParseError(f"line {lineno}: expected 3 fields, got {len(row)}")
            try:
                slot, fid, count = (int(x) for x in row)
            except ValueError:
                raise TraceParseError(f"line {lineno}: non-integer field in {row}") from None
            if count < 0:
                raise TraceParseError(f"line {lineno}: negative count {count}")
            if slot < 0 or fid < 0:
                raise TraceParseError(f"line {lineno}: negative slot or file id")
            rows.append((slot, fid, count))
    if not rows:
        return DemandTrace(np.zeros((0, 0), dtype=np.int64))
    arr = np.asarray(rows, dtype=np.int64)
    slots = np.unique(arr[:, 0])
    if slots[0] != 0 or len(slots) != slots[-1] + 1:
        missing = sorted(set(range(int(slots[-1]) + 1)) - set(slots.tolist()))
        raise TraceParseError(f"slots not contiguous from 0 (missing {missing[:5]})")
    ids = np.unique(arr[:, 1])
    col = np.searchsorted(ids, arr[:, 1])
    agg = np.zeros((len(slots), len(ids)), dtype=np.int64)
    np.add.at(agg, (arr[:, 0], col), arr[:, 2])
    return DemandTrace(agg, file_ids=ids)


def save_trace(trace: DemandTrace, csv_path: str | Path, per_user_path: str | Path | None = None) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "file_id", "count"])
        for t in range(trace.slots):
            for j, fid in enumerate(trace.file_ids):
                w.writerow([t, int(fid), int(trace.aggregate[t, j])])
    if per_user_path is not None and trace.per_user is not None:
        with open(per_user_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["slot", "user_id", "file_id", "count"])
            for t, k, j in zip(*np.nonzero(trace.per_user)):
                w.writerow([int(t), int(k), int(trace.file_ids[j]), int(trace.per_user[t, k, j])])


def load_per_user(csv_path: str | Path, trace: DemandTrace, n_users: int) -> DemandTrace:
    """Attach a ``slot,user_id,file_id,count`` CSV to an aggregate trace."""
    per_user = np.zeros((trace.slots, n_users, trace.files), dtype=np.int64)
    col_of = {int(fid): j for j, fid in enumerate(trace.file_ids)}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["slot", "user_id", "file_id", "count"]:
            raise TraceParseError("line 1: expected header slot,user_id,file_id,count")
        for lineno, row in enumerate(reader, start=2):
            try:
                t, k, fid, c = (int(x) for x in row)
                per_user[t, k, col_of[fid]] += c
            except (ValueError, KeyError, IndexError):
                raise TraceParseError(f"line {lineno}: bad row {row}") from None
    return DemandTrace(trace.aggregate, per_user, trace.file_ids)


def top_f_filter(trace: DemandTrace, n_files: int) -> DemandTrace:
    """Keep the ``n_files`` most requested files; ties go to the smaller file id."""
    if n_files > trace.files or n_files < 1:
        raise ValueError(f"cannot keep {n_files} of {trace.files} files")
    totals = trace.aggregate.sum(axis=0)
    order = np.lexsort((trace.file_ids, -totals))[:n_files]
    keep = np.sort(order)
    per_user = None if trace.per_user is None else trace.per_user[:, :, keep]
    patterns = None if trace.patterns is None else trace.patterns[keep]
    return DemandTrace(trace.aggregate[:, keep], per_user, trace.file_ids[keep], patterns)


def allocate_to_users(trace: DemandTrace, n_users: int, rng_seed: int = 0) -> DemandTrace:
    """Split every aggregate count uniformly at random over ``n_users`` users."""
    if n_users <= 0:
        raise ValueError("need at least one user")
    rng = np.random.default_rng(rng_seed)
    T, F = trace.aggregate.shape
    p = np.full(n_users, 1.0 / n_users)
    per_user = rng.multinomial(trace.aggregate.reshape(-1), p).reshape(T, F, n_users)
    return DemandTrace(trace.aggregate, per_user.transpose(0, 2, 1), trace.file_ids, trace.patterns)


def synth_trace(
    n_files: int = 50,
    n_slots: int = 600,
    n_users: int = 20,
    n_patterns: int = 4,
    period: int = 24,
    noise_level: float = 0.1,
    rng_seed: int = 0,
    mean_rate: float = 20.0,
    drift: float = 0.3,
    release_fraction: float = 0.3,
    hype: float = 0.0,
    hype_decay: float = 48.0,
    phase_jitter: float = 0.5,
    switch_every: float = 150.0,
) -> DemandTrace:
    """Synthetic periodic trace with latent request patterns.

    Each pattern is a random smooth periodic profile (a few harmonics of
    ``period``). Files draw a pattern, a popularity amplitude and a phase
    offset of at most ``phase_jitter`` slots; a slow per-file popularity drift
    is applied on top. Counts are
    ``rint(rate + noise_level * sqrt(rate) * z)`` clipped at zero, so
    ``noise_level = 1`` gives Poisson-like dispersion and ``noise_level = 0``
    an exactly periodic trace (drift, jitter and late releases are disabled
    as well).

    A ``release_fraction`` of the files enter the catalogue late: each gets a
    release slot drawn uniformly from the middle 80% of the horizon and has
    zero requests before it. A fresh release is ``1 + hype`` times as popular
    as its steady state, relaxing back with time constant ``hype_decay``.

    With ``switch_every > 0`` files also change interest profile over time:
    each one moves to a different pattern after exponentially distributed
    dwell times of mean ``switch_every`` slots. ``patterns`` then records
    the initial assignment.
    """
    if n_patterns > n_files or n_patterns < 1:
        raise ValueError("need 1 <= n_patterns <= n_files")
    if not 0.0 <= release_fraction <= 1.0:
        raise ValueError("release_fraction must lie in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    t = np.arange(n_slots)
    # each pattern: three harmonics of the period with random weights and phases
    weights = rng.normal(0.0, 1.0, (n_patterns, 3)) / np.arange(1, 4)
    offsets = rng.uniform(0.0, 2 * np.pi, (n_patterns, 3))
    grid = np.arange(period)

    def profile(i: int, shift: np.ndarray) -> np.ndarray:
        x = 2 * np.pi * np.arange(1, 4)[:, None] * shift[None, :] / period + offsets[i][:, None]
        return (weights[i][:, None] * np.cos(x)).sum(axis=0)

    lo_hi = [(profile(i, grid.astype(float)).min(), np.ptp(profile(i, grid.astype(float)))) for i in range(n_patterns)]

    pattern_of = np.arange(n_files) % n_patterns
    rng.shuffle(pattern_of)
    amp = mean_rate * rng.lognormal(0.0, 0.5, n_files)
    if noise_level > 0:
        phase = rng.uniform(-phase_jitter, phase_jitter, n_files)
    else:
        phase = np.zeros(n_files)
    rates = np.empty((n_slots, n_files))
    for f in range(n_files):
        pat = np.full(n_slots, pattern_of[f])
        if noise_level > 0 and switch_every > 0 and n_patterns > 1:
            at = rng.exponential(switch_every)
            while at < n_slots:
                cur = pat[int(at)]
                pat[int(at):] = (cur + rng.integers(1, n_patterns)) % n_patterns
                at += rng.exponential(switch_every)
        base = np.empty(n_slots)
        for i in np.unique(pat):
            lo, span = lo_hi[i]
            sel = pat == i
            base[sel] = 0.1 + 0.9 * (profile(i, t[sel] + phase[f]) - lo) / (span + 1e-12)
        base = np.maximum(base, 0.05)  # fractional shifts can dip just below the grid minimum
        if noise_level > 0 and drift > 0:
            slope = rng.uniform(-drift, drift)
            base = base * np.exp(slope * (t / n_slots - 0.5))
        rates[:, f] = amp[f] * base
    n_late = int(round(release_fraction * n_files)) if noise_level > 0 else 0
    if n_late:
        late = rng.choice(n_files, size=n_late, replace=False)
        lo, hi = n_slots // 10, max(n_slots // 10 + 1, (9 * n_slots) // 10)
        age = t[:, None] - rng.integers(lo, hi, n_late)[None, :]
        boost = 1.0 + hype * np.exp(-np.maximum(age, 0) / hype_decay)
        rates[:, late] *= np.where(age >= 0, boost, 0.0)
    noisy = rates + noise_level * np.sqrt(rates) * rng.standard_normal(rates.shape)
    counts = np.maximum(np.rint(noisy), 0).astype(np.int64)
    trace = DemandTrace(counts, patterns=pattern_of)
    return allocate_to_users(trace, n_users, rng_seed=rng.integers(2**31))
