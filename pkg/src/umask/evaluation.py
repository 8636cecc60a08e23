"""Held-out evaluation: error and ranking metrics, evidence policies and the
adaptive-versus-static masking comparison.

Sampling only ever sees ``evidence * binary``; held-out truth is read after
completion, when metrics are computed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import autograd as ag
from .config import TASKS, ModelConfig, task_index
from .diffusion import conditioning, reverse_sample_batch
from .mask_policy import horizon, topk_indices
from .params import ParameterStore
from .profile import profile_of
from .synthetic import APP, OCCUPANCY, app_of_cell, generate_dataset
from .tensor import EventHistory
from .training import TrainingData, _schedule, mask_field, stream

POLICIES = ("adaptive", "random-fixed", "block-fixed")
_EVAL = 0xE7A1
_STREAM_GUMBEL, _STREAM_RANDOM, _STREAM_NOISE = 21, 22, 23


class EvaluationError(RuntimeError):
    pass


# metrics -----------------------------------------------------------------------

def rmse_mae(pred, truth, region) -> tuple[float, float]:
    """Errors over the entries selected by ``region``.

    ``region`` is a boolean (T, H, W) field broadcast over channels or a
    boolean array of the full tensor shape.
    """
    pred = getattr(pred, "values", pred)
    truth = getattr(truth, "values", truth)
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise EvaluationError(f"shape mismatch {pred.shape} vs {truth.shape}")
    region = np.asarray(region, dtype=bool)
    if region.shape != truth.shape:
        region = np.broadcast_to(region, truth.shape)
    if not region.any():
        raise EvaluationError("empty evaluation region")
    d = (pred - truth)[region]
    return float(np.sqrt(np.mean(d * d))), float(np.mean(np.abs(d)))


def rank_metrics(scores, relevant, cutoffs=(1, 3, 5)) -> dict[str, float]:
    """Recall, NDCG (binary gains, log2 discount) and MRR at each cutoff.

    Ties are broken toward the lower item index.
    """
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise EvaluationError("relevant set is empty")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.array([int(i) in relevant for i in order])
    out = {}
    for k in cutoffs:
        top = hits[:k]
        disc = 1.0 / np.log2(np.arange(2, len(top) + 2))
        ideal = (1.0 / np.log2(np.arange(2, min(k, len(relevant)) + 2))).sum()
        first = np.flatnonzero(top)
        out[f"recall@{k}"] = float(top.sum() / len(relevant))
        out[f"ndcg@{k}"] = float((disc * top).sum() / ideal)
        out[f"mrr@{k}"] = float(1.0 / (first[0] + 1)) if first.size else 0.0
    return out


def item_scores(x: np.ndarray, window: np.ndarray, n_apps: int) -> tuple[np.ndarray, np.ndarray]:
    """App and location engagement scores from a completed tensor.

    Apps are scored through their proxy cells in the app-activity channel,
    locations through the occupancy channel, both summed over ``window``
    (a boolean vector over time slots). This is the one place that maps
    completions to items.
    """
    C, T, H, W = x.shape
    sel = x[:, np.asarray(window, dtype=bool)].sum(axis=1)          # (C, H, W)
    owner = np.array([[app_of_cell(h, w, W, n_apps) for w in range(W)] for h in range(H)])
    apps = np.array([sel[min(APP, C - 1)][owner == a].sum() for a in range(n_apps)])
    locs = sel[min(OCCUPANCY, C - 1)].ravel()
    return apps, locs


def relevant_items(truth_scores: np.ndarray, n_relevant: int) -> np.ndarray:
    return np.argsort(-truth_scores, kind="stable")[:n_relevant]


# population --------------------------------------------------------------------

@dataclass
class Population:
    train: TrainingData
    train_histories: list
    test_x: np.ndarray
    test_histories: list
    test_ids: np.ndarray

    def test_profiles(self, tau: str, d: int) -> np.ndarray:
        """Test-user profiles built only from events before the held-out window.

        Cold-start users have no tensor history, but their event history is
        the semantic interface and is used whole.
        """
        T = self.test_x.shape[2]
        cut = T if tau == "cold" else T - horizon(tau, T)
        return np.stack([profile_of(_before(h, cut), d) for h in self.test_histories])


def _before(history: EventHistory, cut: int) -> EventHistory:
    keep = history.timestamps < cut
    return EventHistory(history.apps[keep], history.locations[keep], history.timestamps[keep],
                        history.n_apps, history.n_locations)


def build_population(seed: int, n_users: int, n_test: int, cfg: ModelConfig) -> Population:
    users = generate_dataset(seed, n_users + n_test, cfg.dims)
    x = np.stack([u.tensor.values for u in users])
    hist = [u.history for u in users]
    profiles = np.stack([profile_of(h, cfg.profile_dim) for h in hist[:n_users]])
    train = TrainingData(x[:n_users], profiles, np.arange(n_users))
    return Population(train, hist[:n_users], x[n_users:], hist[n_users:],
                      np.arange(n_users, n_users + n_test))


def nearest_train_peer(profiles: np.ndarray, train_profiles: np.ndarray) -> np.ndarray:
    a = profiles / np.linalg.norm(profiles, axis=1, keepdims=True)
    b = train_profiles / np.linalg.norm(train_profiles, axis=1, keepdims=True)
    return np.argmax(a @ b.T, axis=1)


# evidence policies -------------------------------------------------------------

def select_evidence(policy: str, p: np.ndarray, budget: np.ndarray, candidates: np.ndarray,
                    seed: int, user_ids, tau: str) -> tuple[np.ndarray, np.ndarray]:
    """Binary masks and rescaled importance weights for one evidence policy.

    Static policies reveal exactly the adaptive budget per user with uniform
    weights, so only the choice of coordinates differs.
    """
    B = p.shape[0]
    dims = candidates.shape
    flat_cand = np.flatnonzero(candidates.ravel())
    n_cand = flat_cand.size
    ti = task_index(tau)
    binary = np.zeros((B, candidates.size), np.uint8)
    for b, uid in enumerate(user_ids):
        k = int(budget[b])
        if k > n_cand:
            raise EvaluationError(f"budget {k} exceeds {n_cand} candidates")
        if policy == "adaptive":
            g = stream(seed, _EVAL, uid, ti, _STREAM_GUMBEL).gumbel(size=candidates.size)
            with np.errstate(divide="ignore"):
                logits = np.where(candidates.ravel(), np.log(p[b].ravel()), -np.inf) + g
            chosen = topk_indices(logits, k)
        elif policy == "random-fixed":
            chosen = stream(seed, _EVAL, uid, ti, _STREAM_RANDOM).permutation(flat_cand)[:k]
        elif policy == "block-fixed":
            # most recent candidate slots first
            t_of = flat_cand // (dims[1] * dims[2])
            chosen = flat_cand[np.argsort(-t_of, kind="stable")][:k]
        else:
            raise EvaluationError(f"unknown evidence policy {policy!r}")
        binary[b, chosen] = 1
    binary = binary.reshape((B,) + dims)
    if policy == "adaptive":
        weights = p * binary * n_cand
    else:
        weights = binary.astype(np.float64)
    return binary, weights


# regimes -----------------------------------------------------------------------

@dataclass
class RegimeResult:
    tau: str
    policy: str
    rmse: np.ndarray
    mae: np.ndarray
    ranking: dict
    budget: np.ndarray
    samples: np.ndarray


def held_out_region(tau: str, dims3: tuple[int, int, int]) -> np.ndarray:
    T = dims3[0]
    region = np.zeros(dims3, dtype=bool)
    region[T - horizon(tau, T):] = True
    return region


def prepare_regime(store: ParameterStore, cfg: ModelConfig, pop: Population, tau: str):
    """Evidence source, relevance field, budgets and conditioning for the test users."""
    dtype = store.dtype
    profiles = pop.test_profiles(tau, cfg.profile_dim)
    if tau == "cold":
        src = pop.train.x[nearest_train_peer(profiles, pop.train.profiles)]
    else:
        src = pop.test_x
    src = np.asarray(src, dtype=dtype)
    with ag.no_grad():
        mf = mask_field(store, cfg, src, tau)
        task_emb = store["policy.task_emb"].data[task_index(tau)].reshape(1, -1)
        _, _, glob = conditioning(store, mf.f_task, task_emb, profiles.astype(dtype))
    return src, mf, glob.data


def evaluate_regime(store: ParameterStore, cfg: ModelConfig, pop: Population, tau: str, seed: int,
                    policies: Iterable[str] = ("adaptive", "random-fixed"), cutoffs=(1, 3, 5),
                    n_relevant: int = 3, budget_override: int | None = None,
                    truth: np.ndarray | None = None, on_step: Callable | None = None) -> dict:
    """Complete every test user under each policy and score the held-out region.

    All policies share the per-user diffusion noise streams. ``truth``
    overrides the scoring targets (the sampler never sees it).
    """
    dims3 = cfg.dims[1:]
    src, mf, glob = prepare_regime(store, cfg, pop, tau)
    budget = mf.budget if budget_override is None else np.full(len(src), int(budget_override))
    p = mf.p.data.astype(np.float64)
    truth = pop.test_x if truth is None else truth
    region = held_out_region(tau, dims3)
    window = region[:, 0, 0]
    n_apps = pop.test_histories[0].n_apps
    sched = _schedule(cfg)
    ti = task_index(tau)
    results = {}
    for policy in policies:
        binary, weights = select_evidence(policy, p, budget, mf.candidates, seed, pop.test_ids, tau)
        evidence = src * binary[:, None]
        rngs = [stream(seed, _EVAL, uid, ti, _STREAM_NOISE) for uid in pop.test_ids]
        samples = reverse_sample_batch(store, cfg, binary, weights, evidence, glob, sched, rngs,
                                       None if on_step is None else (lambda t, s, _p=policy: on_step(_p, t, s)))
        errs = np.array([rmse_mae(samples[i], truth[i], region) for i in range(len(src))])
        ranking = {}
        for i in range(len(src)):
            pa, pl = item_scores(samples[i], window, n_apps)
            ta, tl = item_scores(truth[i], window, n_apps)
            for kind, ps, ts in (("app", pa, ta), ("loc", pl, tl)):
                for k, v in rank_metrics(ps, relevant_items(ts, n_relevant), cutoffs).items():
                    ranking.setdefault(f"{kind}_{k}", []).append(v)
        results[policy] = RegimeResult(tau, policy, errs[:, 0], errs[:, 1],
                                       {k: np.array(v) for k, v in ranking.items()}, budget, samples)
    return results


# reports -----------------------------------------------------------------------

ERROR_METRICS = ("rmse", "mae")


def metric_rows(seed: int, results: dict) -> list[dict]:
    rows = []
    for policy, r in results.items():
        row = {"seed": seed, "regime": r.tau, "policy": policy,
               "rmse": float(r.rmse.mean()), "mae": float(r.mae.mean()),
               "mean_budget": float(np.mean(r.budget))}
        row.update({k: float(v.mean()) for k, v in sorted(r.ranking.items())})
        rows.append(row)
    return rows


def relative_delta(baseline: float, ours: float) -> float:
    """``(baseline - ours) / baseline``; positive means ours has lower error."""
    if baseline == 0:
        return 0.0 if ours == 0 else float("-inf")
    return (baseline - ours) / baseline


def summarize_comparison(rows: list[dict], ours: str = "adaptive",
                         baseline: str = "random-fixed") -> list[dict]:
    out = []
    regimes = [t for t in TASKS if any(r["regime"] == t for r in rows)]
    for tau in regimes:
        for metric in ERROR_METRICS:
            def mean_of(policy):
                vals = [r[metric] for r in rows if r["regime"] == tau and r["policy"] == policy]
                return float(np.mean(vals)) if vals else float("nan")
            b, o = mean_of(baseline), mean_of(ours)
            seeds = sorted({r["seed"] for r in rows if r["regime"] == tau})
            wins = sum(
                1 for s in seeds
                if _value(rows, s, tau, ours, metric) < _value(rows, s, tau, baseline, metric))
            out.append({"regime": tau, "metric": metric, "baseline": baseline, "ours": ours,
                        "baseline_mean": b, "ours_mean": o, "delta": relative_delta(b, o),
                        "seeds_won": wins, "n_seeds": len(seeds)})
    return out


def _value(rows, seed, tau, policy, metric):
    for r in rows:
        if r["seed"] == seed and r["regime"] == tau and r["policy"] == policy:
            return r[metric]
    return float("nan")


def write_rows_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise EvaluationError("nothing to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
