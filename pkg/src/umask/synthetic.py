"""Seeded generator of desk-scale mobile-behavior tensors.

Each user follows a two-anchor routine: home outside the daily windows, a
commute along an L-shaped path from home to work, work in between, and a
return commute in the evening window. With probability ``1 - regularity``
a slot is spent at a random cell instead, and additive noise of the same
scale is mixed into every channel. Users are drawn around a handful of
archetypes so that batches contain genuine behavioral peers.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .tensor import BehaviorTensor, EventHistory, ShapeError, SyntheticUserProfile

DEFAULT_DIMS = (3, 32, 8, 8)
N_APPS = 8
SLOTS_PER_DAY = 8

APP, TRAFFIC, OCCUPANCY = 0, 1, 2


class SyntheticUser(NamedTuple):
    tensor: BehaviorTensor
    history: EventHistory
    profile: SyntheticUserProfile


def check_dims(dims) -> tuple[int, int, int, int]:
    if len(dims) != 4:
        raise ShapeError(f"dims must be (C, T, H, W), got {dims}")
    c, t, h, w = (int(n) for n in dims)
    if min(c, t, h, w) < 1:
        raise ShapeError(f"dims must be positive, got {dims}")
    if c > 3:
        raise ShapeError("the generator models at most 3 channels (app, traffic, occupancy)")
    return c, t, h, w


def slots_per_day(T: int) -> int:
    return min(SLOTS_PER_DAY, T)


def day_windows(spd: int, commute_start: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Morning and evening commute windows within one day of ``spd`` slots."""
    if spd < 4:
        return (0, min(1, spd)), (min(1, spd), min(2, spd))
    cs = int(np.clip(commute_start, 0, spd - 4))
    es = cs + max(2, spd // 2 - 1)
    es = min(es, spd - 1)
    return (cs, cs + 1), (es, es + 1)


def app_of_cell(h: int, w: int, W: int, n_apps: int = N_APPS) -> int:
    """App category anchored at a grid cell (the per-app proxy cells)."""
    return (h * W + w) % n_apps


def commute_path(home: tuple[int, int], work: tuple[int, int]) -> list[tuple[int, int]]:
    (h0, w0), (h1, w1) = home, work
    path = []
    step = 1 if h1 >= h0 else -1
    for h in range(h0, h1 + step, step):
        path.append((h, w0))
    step = 1 if w1 >= w0 else -1
    for w in range(w0 + step, w1 + step, step) if w1 != w0 else ():
        path.append((h1, w))
    return path


def scheduled_place(profile: SyntheticUserProfile, slot_of_day: int) -> str:
    cs, ce = profile.commute_window
    es, ee = profile.evening_window
    if cs <= slot_of_day < ce or es <= slot_of_day < ee:
        return "commute"
    if ce <= slot_of_day < es:
        return "work"
    return "home"


def render_user(profile: SyntheticUserProfile, dims, rng: np.random.Generator,
                n_apps: int = N_APPS) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """Realize one user's tensor and a paired event stream.

    The tensor and the events use separate draws from ``rng`` so the event
    history is a second, independent realization of the same routine.
    """
    C, T, H, W = check_dims(dims)
    spd = slots_per_day(T)
    r = profile.regularity
    prefs = profile.app_preferences
    cell_pref = np.array([[prefs[app_of_cell(h, w, W, n_apps)] for w in range(W)] for h in range(H)])
    cell_pref = cell_pref / prefs.max()
    path = commute_path(profile.home_cell, profile.work_cell)

    planes = np.zeros((3, T, H, W))
    for t in range(T):
        place = scheduled_place(profile, t % spd)
        if rng.random() < 1.0 - r:
            cells = [(int(rng.integers(H)), int(rng.integers(W)))]
            place = "random"
        elif place == "commute":
            cells = path
        elif place == "work":
            cells = [profile.work_cell]
        else:
            cells = [profile.home_cell]
        share = 1.0 / len(cells)
        for (h, w) in cells:
            planes[OCCUPANCY, t, h, w] += share
            planes[TRAFFIC, t, h, w] += 0.9 if place == "commute" else 0.3
            planes[APP, t, h, w] += 0.3 + 0.7 * cell_pref[h, w]
    noise_scale = 0.05 * (1.0 - r)
    if noise_scale > 0:
        planes += noise_scale * np.abs(rng.standard_normal(planes.shape))
    planes = np.clip(planes, 0.0, 1.0)

    events = []
    for t in range(T):
        place = scheduled_place(profile, t % spd)
        if rng.random() < 1.0 - r:
            cell = (int(rng.integers(H)), int(rng.integers(W)))
        elif place == "commute":
            cell = path[int(rng.integers(len(path)))]
        elif place == "work":
            cell = profile.work_cell
        else:
            cell = profile.home_cell
        if rng.random() < 0.5:
            app = app_of_cell(cell[0], cell[1], W, n_apps)
        else:
            app = int(rng.choice(n_apps, p=prefs))
        events.append((app, cell[0] * W + cell[1], t))
    return planes[:C].astype(np.float32), events


def _jitter(cell, H, W, rng, radius=1):
    h = int(np.clip(cell[0] + rng.integers(-radius, radius + 1), 0, H - 1))
    w = int(np.clip(cell[1] + rng.integers(-radius, radius + 1), 0, W - 1))
    return h, w


def draw_profiles(seed: int, n_users: int, dims, n_groups: int | None = None,
                  n_apps: int = N_APPS) -> list[SyntheticUserProfile]:
    _, T, H, W = check_dims(dims)
    spd = slots_per_day(T)
    if n_groups is None:
        n_groups = int(np.clip(n_users // 16, 1, 8))
    arng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED)))
    archetypes = []
    for _ in range(n_groups):
        home = (int(arng.integers(H)), int(arng.integers(W)))
        work = (int(arng.integers(H)), int(arng.integers(W)))
        start = int(arng.integers(0, max(1, spd - 3)))
        base_prefs = arng.dirichlet(np.full(n_apps, 0.5))
        archetypes.append((home, work, start, base_prefs))

    profiles = []
    for i in range(n_users):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        g = i % n_groups
        home, work, start, base_prefs = archetypes[g]
        prefs = rng.dirichlet(50.0 * base_prefs + 0.1)
        commute, evening = day_windows(spd, start + int(rng.integers(0, 2)))
        profiles.append(SyntheticUserProfile(
            home_cell=_jitter(home, H, W, rng),
            work_cell=_jitter(work, H, W, rng),
            commute_window=commute,
            evening_window=evening,
            app_preferences=prefs / prefs.sum(),
            regularity=float(rng.uniform(0.6, 1.0)),
            group=g,
        ))
    return profiles


def generate_user(profile: SyntheticUserProfile, dims, seed: int, index: int = 0,
                  n_apps: int = N_APPS) -> SyntheticUser:
    check_dims(dims)
    rng = np.random.default_rng(np.random.SeedSequence((seed, index, 0xDA7A)))
    values, events = render_user(profile, dims, rng, n_apps)
    H, W = dims[2], dims[3]
    return SyntheticUser(BehaviorTensor(values),
                         EventHistory.from_events(events, n_apps, H * W), profile)


def generate_dataset(seed: int, n_users: int, dims=DEFAULT_DIMS) -> list[SyntheticUser]:
    """Deterministic synthetic population of ``n_users`` users."""
    if n_users < 1:
        raise ValueError("n_users must be at least 1")
    dims = check_dims(dims)
    profiles = draw_profiles(seed, n_users, dims)
    return [generate_user(p, dims, seed, i) for i, p in enumerate(profiles)]


def occupancy_entropy(values: np.ndarray) -> float:
    """Mean over time of the Shannon entropy of the occupancy distribution over cells."""
    occ = np.asarray(values)[min(OCCUPANCY, values.shape[0] - 1)]
    flat = occ.reshape(occ.shape[0], -1)
    tot = flat.sum(axis=1, keepdims=True)
    p = np.divide(flat, tot, out=np.zeros_like(flat), where=tot > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
    return float(ent.mean())
