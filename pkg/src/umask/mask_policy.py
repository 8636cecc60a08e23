"""User- and task-adaptive evidence masks.

The pipeline per batch is: soft group assignment, batch similarity,
reliability context, scaling factor, observation ratio and budget; then per
user a relevance field over (t, h, w) built from a task temporal profile and
a user spatial affinity, an optional cold-start flattening, and a
ratio-constrained Gumbel-Top-k draw.

Numeric helpers accept numpy arrays or ``Tensor`` values. When no input is a
``Tensor`` they return numpy arrays.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import TASKS, ConfigError, ModelConfig, task_index
from .params import ParameterStore
from .tensor import EvidenceMask


def _numeric(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        taped = any(isinstance(a, Tensor) for a in (*args, *kwargs.values()))
        out = fn(*args, **kwargs)
        if taped:
            return out
        if isinstance(out, tuple):
            return tuple(o.data if isinstance(o, Tensor) else o for o in out)
        return out.data if isinstance(out, Tensor) else out

    return wrapper


@dataclass(frozen=True)
class TaskSpec:
    tau: str
    base_ratio_logit: float
    temporal_profile: np.ndarray
    mixing_v: np.ndarray
    mixing_c: float
    task_embedding: np.ndarray
    cold_epsilon: float = 0.3

    def __post_init__(self):
        task_index(self.tau)
        if not 0.0 <= self.cold_epsilon <= 1.0:
            raise ConfigError("cold_epsilon must lie in [0, 1]")

    @property
    def rho(self) -> float:
        return float(np.exp(-np.logaddexp(0.0, -self.base_ratio_logit)))

    @property
    def phi(self) -> np.ndarray:
        """Nonnegative temporal profile (softplus of the raw parameter)."""
        return np.logaddexp(0.0, np.asarray(self.temporal_profile, dtype=np.float64))

    @property
    def beta(self) -> float:
        s = float(np.dot(self.mixing_v, self.task_embedding) + self.mixing_c)
        return float(np.exp(-np.logaddexp(0.0, -s)))


@dataclass(frozen=True)
class BatchReliability:
    assignment: np.ndarray
    similarity: np.ndarray
    neighbor_sim: np.ndarray
    context: np.ndarray
    scaling: np.ndarray


@dataclass(frozen=True)
class RelevanceField:
    """Sampling distribution over (t, h, w).

    ``raw`` is the mixture before canonicalization; ``scores`` is the floored,
    candidate-restricted distribution that sums to one.
    """

    scores: np.ndarray
    temporal: np.ndarray
    spatial: np.ndarray
    beta: float
    raw: np.ndarray
    candidates: np.ndarray | None = None

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.scores.shape


# batch reliability ----------------------------------------------------------

@_numeric
def group_softmax(logits, temperature: float):
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    return ag.softmax(ag.as_tensor(logits) * (1.0 / temperature), axis=-1)


@_numeric
def assign_groups(z_batch, temperature: float, weight, bias=None):
    """Soft behavior-group assignment rows (on the simplex)."""
    return group_softmax(ag.linear(z_batch, weight, bias), temperature)


@_numeric
def batch_similarity(assignment, features, alpha):
    a = ag.as_tensor(assignment)
    f = ag.as_tensor(features)
    norms = np.linalg.norm(f.data, axis=1)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero feature row")
    u = f / ag.sqrt((f * f).sum(axis=1, keepdims=True))
    return ag.matmul(a, a.T) * alpha + ag.matmul(u, u.T) * (1.0 - alpha)


def assignment_entropy(assignment: np.ndarray) -> np.ndarray:
    a = np.asarray(assignment, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, a * np.log(a), 0.0)
    return -terms.sum(axis=1)


@_numeric
def reliability_context(similarity, z_batch, assignment):
    """Rows (max neighbor similarity, latent norm, assignment entropy)."""
    s = ag.as_tensor(similarity)
    z = ag.as_tensor(z_batch)
    a = ag.as_tensor(assignment)
    B = s.shape[0]
    if B == 1:
        neighbor = ag.Tensor(np.zeros(1, dtype=s.dtype))
    else:
        off = ag.where(np.eye(B, dtype=bool), np.full((B, B), -np.inf, dtype=s.dtype), s)
        neighbor = ag.tmax(off, axis=1)
    norm = ag.Tensor(np.linalg.norm(z.data, axis=1)) if not z.requires_grad else ag.sqrt((z * z).sum(axis=1))
    # 0 * log 0 = 0
    safe = ag.where(a.data > 0, a, np.ones(a.shape, dtype=a.dtype))
    ent = -(a * ag.log(safe)).sum(axis=1)
    return ag.stack([neighbor, norm, ent], axis=1)


@_numeric
def scaling_factor(context, w, c):
    return ag.sigmoid(ag.linear(context, ag.as_tensor(w).reshape(-1, 1)).reshape(-1) + c)


def final_ratio(rho: float, gamma):
    """Observation ratio: task base ratio times user scaling factor."""
    return rho * gamma


def evidence_budget(ratio, n_coords: int):
    """Number of revealed coordinates, ``floor(ratio * n_coords)``."""
    return np.floor(np.asarray(ratio, dtype=np.float64) * n_coords).astype(np.int64)


# relevance field -------------------------------------------------------------

@_numeric
def spatial_affinity(z, lambda_profile, locations):
    """Rectified cosine between the importance-weighted pattern and each cell.

    Accepts a single user (vectors) or a batch (rows). ``locations`` is the
    (H*W, d) table; the result is flat over cells. A zero weighted vector
    yields zero affinity everywhere.
    """
    z = ag.as_tensor(z)
    lam = ag.as_tensor(lambda_profile)
    emb = ag.as_tensor(locations)
    single = z.ndim == 1
    if single:
        z = z.reshape(1, -1)
        lam = lam.reshape(1, -1)
    q = z * lam
    qn = np.sqrt((q.data * q.data).sum(axis=1, keepdims=True))
    en = np.sqrt((emb.data * emb.data).sum(axis=1))
    if np.any(en == 0):
        raise ValueError("location embedding rows must be nonzero")
    dead = (qn == 0)
    qnorm = ag.sqrt((q * q).sum(axis=1, keepdims=True) + dead.astype(q.dtype))
    cos = ag.matmul(q, emb.T) / qnorm * (1.0 / en)
    psi = ag.relu(cos) * (~dead).astype(q.dtype)
    return psi[0] if single else psi


@_numeric
def mixing_beta(v, task_embedding, c):
    return ag.sigmoid((ag.as_tensor(v) * task_embedding).sum(axis=-1) + c)


def canonicalize(raw, p_floor: float, candidates: np.ndarray | None = None):
    """Floor the raw scores on the candidate set and renormalize to sum one."""
    raw = ag.as_tensor(raw)
    floored = ag.maximum(raw, ag.Tensor(np.full(raw.shape, p_floor, dtype=raw.dtype)))
    if candidates is not None:
        floored = floored * np.broadcast_to(candidates, raw.shape).astype(raw.dtype)
    axes = tuple(range(raw.ndim - 3, raw.ndim))
    return floored / floored.sum(axis=axes, keepdims=True)


@_numeric
def relevance_raw(beta, phi, psi):
    """``beta * phi_t + (1 - beta) * psi_hw`` broadcast over (t, h, w).

    ``psi`` may be (H, W) or batched (B, H, W) with a matching ``beta``
    vector and ``phi`` rows.
    """
    beta = ag.as_tensor(beta)
    phi = ag.as_tensor(phi)
    psi = ag.as_tensor(psi)
    if psi.ndim == 2:
        return phi.reshape(-1, 1, 1) * beta + psi.reshape(1, *psi.shape) * (1.0 - beta)
    B = psi.shape[0]
    b = beta.reshape(B, 1, 1, 1)
    return phi.reshape(B, -1, 1, 1) * b + psi.reshape(B, 1, *psi.shape[1:]) * (1.0 - b)


def relevance(task: TaskSpec, psi, p_floor: float = 1e-8,
              candidates: np.ndarray | None = None) -> RelevanceField:
    psi = np.asarray(psi, dtype=np.float64)
    if np.any(psi < 0):
        raise ValueError("spatial affinity must be nonnegative")
    beta = task.beta
    phi = task.phi
    raw = relevance_raw(beta, phi, psi)
    scores = canonicalize(raw, p_floor, candidates).data
    return RelevanceField(scores, phi, psi, beta, raw, candidates)


def cold_adjust(field: RelevanceField, epsilon: float) -> RelevanceField:
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError("epsilon must lie in [0, 1]")
    p = mix_uniform(field.scores, epsilon, field.candidates)
    return RelevanceField(p, field.temporal, field.spatial, field.beta, field.raw, field.candidates)


@_numeric
def mix_uniform(p, epsilon: float, candidates: np.ndarray | None = None):
    """``(1 - eps) * p + eps * uniform`` with uniform over the candidate set."""
    p = ag.as_tensor(p)
    shape3 = p.shape[-3:]
    if candidates is None:
        uni = np.full(p.shape, 1.0 / np.prod(shape3))
    else:
        cand = np.broadcast_to(candidates, p.shape).astype(np.float64)
        uni = cand / cand.sum(axis=(-3, -2, -1), keepdims=True)
    return p * (1.0 - epsilon) + uni.astype(p.dtype) * epsilon


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


# sampling ---------------------------------------------------------------------

def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def topk_indices(perturbed: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis; ties go to the lowest index."""
    order = np.argsort(-perturbed, axis=-1, kind="stable")
    return order[..., :k]


def gumbel_topk(log_scores: np.ndarray, k: int, rng, n_samples: int | None = None) -> np.ndarray:
    """Sample k indices without replacement by perturbing log-scores with Gumbel noise."""
    log_scores = np.asarray(log_scores, dtype=np.float64)
    gen = _rng(rng)
    shape = log_scores.shape if n_samples is None else (n_samples,) + log_scores.shape
    g = log_scores + gen.gumbel(size=shape)
    return topk_indices(g, k)


def sample_mask(field: RelevanceField | np.ndarray, budget: int, rng_seed=None,
                hard: bool = False) -> EvidenceMask:
    """Ratio-constrained top-k draw with weights ``binary * p``.

    ``hard=True`` disables the Gumbel noise and returns the deterministic
    top-k of log p.
    """
    p = field.scores if isinstance(field, RelevanceField) else np.asarray(field, dtype=np.float64)
    dims = p.shape
    flat = p.ravel()
    n_avail = int(np.count_nonzero(flat > 0))
    if budget < 0 or budget > flat.size:
        raise ConfigError(f"budget {budget} outside [0, {flat.size}]")
    if budget > n_avail:
        raise ConfigError(f"budget {budget} exceeds the {n_avail} candidate coordinates")
    with np.errstate(divide="ignore"):
        logp = np.log(flat)
    if hard:
        idx = topk_indices(logp, budget)
    else:
        idx = gumbel_topk(logp, budget, rng_seed)
    binary = np.zeros(flat.size, np.uint8)
    binary[idx] = 1
    binary = binary.reshape(dims)
    return EvidenceMask(binary, binary * p, budget)


def inclusion_frequencies(scores, k: int, n_samples: int, rng) -> np.ndarray:
    """Empirical per-coordinate inclusion rate of Gumbel-Top-k draws."""
    scores = np.asarray(scores, dtype=np.float64)
    idx = gumbel_topk(np.log(scores), k, rng, n_samples)
    counts = np.bincount(idx.ravel(), minlength=scores.size)
    return counts / n_samples


# parameters and batched policy -------------------------------------------------

def init_policy(store: ParameterStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    _, T, _, _ = cfg.dims
    d, K = cfg.d, cfg.n_groups
    n_tasks = len(TASKS)
    lim = np.sqrt(6.0 / (d + K))
    store.add("policy.phi_w", rng.uniform(-lim, lim, (d, K)))
    store.add("policy.phi_b", np.zeros(K))
    store.add("policy.log_temperature", np.log(cfg.group_temperature))
    a = cfg.alpha_init
    store.add("policy.alpha_logit", np.log(a / (1.0 - a)))
    store.add("policy.w", np.zeros(3))
    store.add("policy.c", 0.0)
    r = cfg.base_ratio_init
    store.add("policy.base_ratio_logit", np.full(n_tasks, np.log(r / (1.0 - r))))
    # softplus(0.5413) = 1: a flat temporal profile
    store.add("policy.temporal", np.full((n_tasks, T), 0.5413248546129181))
    store.add("policy.mix_v", 0.1 * rng.standard_normal(d))
    store.add("policy.mix_c", np.zeros(n_tasks))
    store.add("policy.task_emb", rng.standard_normal((n_tasks, d)) / np.sqrt(d))


def task_spec(store: ParameterStore, cfg: ModelConfig, tau: str) -> TaskSpec:
    i = task_index(tau)
    return TaskSpec(
        tau=tau,
        base_ratio_logit=float(store["policy.base_ratio_logit"].data[i]),
        temporal_profile=store["policy.temporal"].data[i].astype(np.float64),
        mixing_v=store["policy.mix_v"].data.astype(np.float64),
        mixing_c=float(store["policy.mix_c"].data[i]),
        task_embedding=store["policy.task_emb"].data[i].astype(np.float64),
        cold_epsilon=cfg.cold_epsilon,
    )


def batch_reliability(store: ParameterStore, z_batch) -> tuple[BatchReliability, Tensor]:
    """Reliability statistics for a batch; returns the record and the taped scaling."""
    z = ag.as_tensor(z_batch)
    temp = float(np.exp(store["policy.log_temperature"].data))
    A = assign_groups(z, temp, store["policy.phi_w"], store["policy.phi_b"])
    alpha = ag.sigmoid(store["policy.alpha_logit"])
    S = batch_similarity(A, z, alpha)
    ctx = reliability_context(S, z, A)
    gamma = scaling_factor(ctx, store["policy.w"], store["policy.c"])
    rec = BatchReliability(A.data, S.data, ctx.data[:, 0], ctx.data, gamma.data)
    return rec, gamma


def horizon(tau: str, T: int) -> int:
    """Held-out trailing slots per regime: T/8 (short), T/2 (long), all of T (cold)."""
    task_index(tau)
    if tau == "short":
        return max(1, T // 8)
    if tau == "long":
        return max(1, T // 2)
    return T


def candidate_region(tau: str, dims3: tuple[int, int, int]) -> np.ndarray:
    """Coordinates eligible as evidence: the history before the held-out window.

    Cold start draws evidence from a peer's tensor, so every coordinate is
    eligible there.
    """
    T, H, W = dims3
    cand = np.ones(dims3, dtype=bool)
    if tau != "cold":
        cand[T - horizon(tau, T):] = False
    return cand
