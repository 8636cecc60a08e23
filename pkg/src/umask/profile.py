"""Deterministic user profiles from event histories.

A history is reduced to app-location co-occurrence counts, a time-of-day
histogram and a session-regularity score. The profile embedding is a fixed
seeded random projection of those statistics onto the unit sphere. Vectors
produced elsewhere can be wrapped with ``ProfileEmbedding.external``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .synthetic import SLOTS_PER_DAY
from .tensor import EventHistory

DEFAULT_BINS = 8
DEFAULT_DIM = 32
THETA_CORR = 0.15
PROJECTION_SEED = 0x5C0FE


@dataclass(frozen=True, eq=False)
class BehaviorSummary:
    time_hist: np.ndarray
    cooccur: np.ndarray          # raw counts, (n_locations, n_apps)
    session_regularity: float

    @property
    def cooccur_normalized(self) -> np.ndarray:
        return row_normalize(self.cooccur)

    def features(self) -> np.ndarray:
        """Flat vector fed to the projection."""
        return np.concatenate([self.cooccur_normalized.ravel(), self.time_hist,
                               [self.session_regularity]])


@dataclass(frozen=True, eq=False)
class ProfileEmbedding:
    vec: np.ndarray
    provenance: str = "deterministic"

    def __post_init__(self):
        v = np.asarray(self.vec, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("profile embedding must be a finite vector")
        if abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise ValueError("profile embedding must have unit norm")
        if self.provenance not in ("deterministic", "external"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        v.setflags(write=False)
        object.__setattr__(self, "vec", v)

    @classmethod
    def external(cls, vec) -> "ProfileEmbedding":
        v = np.asarray(vec, dtype=np.float64)
        n = np.linalg.norm(v)
        if not np.isfinite(n) or n == 0:
            raise ValueError("external embedding must be finite and nonzero")
        return cls(v / n, "external")


def row_normalize(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)


def cooccurrence(history: EventHistory) -> np.ndarray:
    c = np.zeros((history.n_locations, history.n_apps))
    np.add.at(c, (history.locations, history.apps), 1.0)
    return c


def time_bin(timestamps, bins: int, slots_per_day: int = SLOTS_PER_DAY) -> np.ndarray:
    slot = np.asarray(timestamps, dtype=np.int64) % slots_per_day
    return slot * bins // slots_per_day


def summarize(history: EventHistory, bins: int = DEFAULT_BINS,
              slots_per_day: int = SLOTS_PER_DAY) -> BehaviorSummary:
    if bins < 2:
        raise ValueError("need at least two time bins")
    counts = cooccurrence(history)
    if len(history) == 0:
        return BehaviorSummary(np.zeros(bins), counts, 0.0)
    tb = time_bin(history.timestamps, bins, slots_per_day)
    hist = np.bincount(tb, minlength=bins).astype(np.float64)
    hist /= hist.sum()

    # first active bin of each day
    days = np.asarray(history.timestamps) // slots_per_day
    starts = {}
    for d, b in zip(days.tolist(), tb.tolist()):
        starts[d] = min(b, starts.get(d, bins))
    p = np.bincount(list(starts.values()), minlength=bins) / len(starts)
    nz = p[p > 0]
    sigma = 1.0 - float(-(nz * np.log(nz)).sum()) / np.log(bins)
    return BehaviorSummary(hist, counts, float(np.clip(sigma, 0.0, 1.0)))


def projection_matrix(n_features: int, d: int = DEFAULT_DIM, seed: int = PROJECTION_SEED) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((seed, n_features, d)))
    return rng.standard_normal((d, n_features)) / np.sqrt(d)


def project(summary: BehaviorSummary, d: int = DEFAULT_DIM) -> np.ndarray:
    """Pre-normalization embedding ``P @ features``."""
    f = summary.features()
    return projection_matrix(f.size, d) @ f


def embed(summary: BehaviorSummary, d: int = DEFAULT_DIM) -> ProfileEmbedding:
    v = project(summary, d)
    n = np.linalg.norm(v)
    if n == 0:
        # unknown user
        e = np.zeros(d)
        e[0] = 1.0
        return ProfileEmbedding(e)
    return ProfileEmbedding(v / n)


def profile_of(history: EventHistory, d: int = DEFAULT_DIM, bins: int = DEFAULT_BINS) -> np.ndarray:
    return embed(summarize(history, bins), d).vec


def correlation_gap(real: EventHistory, augmented: EventHistory) -> float:
    if (real.n_apps, real.n_locations) != (augmented.n_apps, augmented.n_locations):
        raise ValueError("histories use different vocabularies")
    diff = row_normalize(cooccurrence(real)) - row_normalize(cooccurrence(augmented))
    return float(np.linalg.norm(diff))


def _apportioned(history: EventHistory, n_events: int, rng: np.random.Generator) -> np.ndarray:
    # largest-remainder allocation of n_events over the observed events
    n = len(history)
    share = np.full(n, n_events / n)
    counts = np.floor(share).astype(np.int64)
    rest = n_events - counts.sum()
    if rest:
        counts[rng.permutation(n)[:rest]] += 1
    return np.repeat(np.arange(n), counts)


def augment(history: EventHistory, n_events: int, seed, theta: float = THETA_CORR,
            max_tries: int = 16) -> EventHistory:
    """Resample events from the empirical joint of (app, location, time).

    Only observed events are reused, so no unseen app-location pair can
    appear. Draws whose correlation gap exceeds ``theta`` are rejected; after
    ``max_tries`` a proportional allocation is tried before giving up.
    """
    if n_events < 0:
        raise ValueError("n_events must be nonnegative")
    if n_events == 0:
        return EventHistory.from_events([], history.n_apps, history.n_locations)
    if len(history) == 0:
        raise ValueError("cannot augment an empty history")
    events = np.stack([history.apps, history.locations, history.timestamps], axis=1)

    def build(idx):
        chosen = events[idx]
        chosen = chosen[np.argsort(chosen[:, 2], kind="stable")]
        return EventHistory(chosen[:, 0], chosen[:, 1], chosen[:, 2], history.n_apps, history.n_locations)

    if len(history) == 1:
        return build(np.zeros(n_events, dtype=np.int64))
    for attempt in range(max_tries):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), attempt)))
        out = build(rng.integers(0, len(history), size=n_events))
        if correlation_gap(history, out) <= theta:
            return out
    out = build(_apportioned(history, n_events, np.random.default_rng(np.random.SeedSequence((int(seed), max_tries)))))
    gap = correlation_gap(history, out)
    if gap > theta:
        raise ValueError(f"no augmentation of {n_events} events meets the correlation bound "
                         f"({gap:.3f} > {theta})")
    return out


def write_embeddings_csv(path, user_ids, embeddings) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        for uid, e in zip(user_ids, embeddings):
            vec = e.vec if isinstance(e, ProfileEmbedding) else np.asarray(e)
            wr.writerow([int(uid)] + [repr(float(x)) for x in vec])


def read_embeddings_csv(path) -> dict[int, ProfileEmbedding]:
    out = {}
    with open(Path(path), newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            out[int(row[0])] = ProfileEmbedding.external([float(x) for x in row[1:]])
    return out
