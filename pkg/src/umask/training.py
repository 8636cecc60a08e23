"""Joint training of the mask policy, encoder chain and denoiser.

One step follows the end-to-end procedure: encode, disentangle, project,
sensitivity, refine, batch reliability, ratio and budget, relevance (with
cold-start flattening), Gumbel-Top-k mask, noise injection at a random
diffusion step, denoise, and the reconstruction + InfoNCE objective.

Random draws come from counter-style streams keyed by (seed, epoch, batch,
user, task, purpose) so results do not depend on batch layout or order of
evaluation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import TASKS, ModelConfig, TrainConfig, task_index
from .diffusion import (conditioning, denoise_tokens, denoiser_inputs, forward_sample_batch,
                        init_denoiser, make_schedule)
from .encoder import (disentangle, encode_behavior, init_encoder, refine_pattern, sensitivity,
                      task_project)
from .mask_policy import (batch_reliability, candidate_region, canonicalize, evidence_budget,
                          init_policy, mix_uniform, spatial_affinity, topk_indices)
from .params import ParameterStore
from .synthetic import SLOTS_PER_DAY

_STREAM_PERM, _STREAM_TASK, _STREAM_STEP, _STREAM_NOISE, _STREAM_GUMBEL, _STREAM_AUG = 11, 12, 13, 14, 15, 16


class TrainingDivergence(FloatingPointError):
    pass


def stream(*key: int) -> np.random.Generator:
    """Independent generator for an integer key tuple."""
    return np.random.default_rng(np.random.SeedSequence(tuple(int(k) for k in key)))


def init_params(cfg: ModelConfig, seed: int, dtype=np.float64,
                infonce_temperature: float = 0.1) -> ParameterStore:
    store = ParameterStore(np.float64)
    rng = stream(seed, 0xC0DE)
    init_encoder(store, cfg, rng)
    init_policy(store, cfg, rng)
    init_denoiser(store, cfg, rng)
    store.add("infonce.log_temperature", np.log(infonce_temperature))
    return store.astype(dtype) if np.dtype(dtype) != np.float64 else store


# losses ------------------------------------------------------------------------

def mse(pred, target) -> Tensor:
    diff = ag.as_tensor(pred) - target
    return (diff * diff).mean()


def infonce(f_short, f_long, temperature) -> Tensor:
    """Symmetric InfoNCE: same-user (short, long) pairs are positives."""
    a = ag.as_tensor(f_short)
    b = ag.as_tensor(f_long)
    an = a / ag.sqrt((a * a).sum(axis=1, keepdims=True))
    bn = b / ag.sqrt((b * b).sum(axis=1, keepdims=True))
    logits = ag.matmul(an, bn.T) / temperature
    B = logits.shape[0]
    diag = (np.arange(B), np.arange(B))
    rows = ag.log_softmax(logits, axis=1)[diag]
    cols = ag.log_softmax(logits, axis=0)[diag]
    return -(rows.mean() + cols.mean()) * 0.5


def infonce_loss(f_short_batch, f_long_batch, temperature: float) -> float:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if np.asarray(f_short_batch).shape[0] < 2:
        raise ValueError("InfoNCE needs at least two users")
    with ag.no_grad():
        return float(infonce(np.asarray(f_short_batch, dtype=np.float64),
                             np.asarray(f_long_batch, dtype=np.float64), temperature).data)


def reconstruction_loss(x0, prediction) -> float:
    """Mean squared error over all entries."""
    x0 = np.asarray(x0, dtype=np.float64)
    return float(np.mean((x0 - np.asarray(prediction, dtype=np.float64)) ** 2))


# batch forward -----------------------------------------------------------------

@dataclass
class TrainingData:
    x: np.ndarray            # (N, C, T, H, W)
    profiles: np.ndarray     # (N, profile_dim)
    user_ids: np.ndarray     # (N,)

    def __len__(self) -> int:
        return int(self.x.shape[0])


@dataclass
class BatchDraws:
    """Everything random about one batch, fixed up front."""

    steps: np.ndarray
    noise: np.ndarray
    gumbel: np.ndarray
    frozen_binary: np.ndarray | None = None


@dataclass
class StepResult:
    total: Tensor
    rec: Tensor
    nce: Tensor
    rho: np.ndarray
    gamma: np.ndarray
    budget: np.ndarray
    binary: np.ndarray
    relevance: Tensor
    prediction: Tensor
    extras: dict = field(default_factory=dict)


def peer_indices(profiles: np.ndarray) -> np.ndarray:
    """Most similar other row under cosine similarity of profile embeddings."""
    p = np.asarray(profiles, dtype=np.float64)
    norms = np.linalg.norm(p, axis=1, keepdims=True)
    u = p / np.where(norms > 0, norms, 1.0)
    sim = u @ u.T
    np.fill_diagonal(sim, -np.inf)
    return np.argmax(sim, axis=1)


def draw_batch(cfg: ModelConfig, seed: int, epoch: int, batch_index: int, user_ids,
               tau: str) -> BatchDraws:
    shape = cfg.dims
    T, H, W = shape[1:]
    ti = task_index(tau)
    steps, noise, gumbel = [], [], []
    for u in user_ids:
        steps.append(stream(seed, epoch, batch_index, u, _STREAM_STEP).integers(1, cfg.diffusion_steps + 1))
        noise.append(stream(seed, epoch, batch_index, u, _STREAM_NOISE).standard_normal(shape))
        gumbel.append(stream(seed, epoch, u, ti, _STREAM_GUMBEL).gumbel(size=(T, H, W)))
    return BatchDraws(np.array(steps), np.stack(noise), np.stack(gumbel))


def history_view(x: np.ndarray, tau: str) -> np.ndarray:
    """Zero the held-out window so the encoder only sees history."""
    cand = candidate_region(tau, x.shape[-3:])
    return x * cand[None, None]


@dataclass
class MaskField:
    """Latents, reliability and the canonical relevance field for a batch."""

    f_short: Tensor
    f_long: Tensor
    f_task: Tensor
    lam: Tensor
    z: Tensor
    rho: float
    gamma: np.ndarray
    budget: np.ndarray
    p: Tensor
    psi: Tensor
    candidates: np.ndarray

    @property
    def n_candidates(self) -> int:
        return int(self.candidates.sum())


def mask_field(store: ParameterStore, cfg: ModelConfig, src: np.ndarray, tau: str) -> MaskField:
    """Encoder chain through the relevance field for evidence source ``src``."""
    B = src.shape[0]
    ti = task_index(tau)
    T, H, W = cfg.dims[1:]
    cand = candidate_region(tau, (T, H, W))

    h = encode_behavior(store, history_view(src, tau))
    fs, fl, fp = disentangle(store, h)
    ft = task_project(store, fs, fl, fp, tau)
    _, lam = sensitivity(store, ft, tau, cfg.fisher_eps)
    z = refine_pattern(store, fp, tau, cfg.refine_steps, cfg.refine_eta)

    rel, _ = batch_reliability(store, z)
    rho = 1.0 / (1.0 + np.exp(-float(store["policy.base_ratio_logit"].data[ti])))
    # budgets count all T*H*W coordinates; the cap only matters for ratios above the candidate share
    budget = np.minimum(evidence_budget(rho * rel.scaling, T * H * W), int(cand.sum()))

    psi = spatial_affinity(z, lam, store["loc.emb"]).reshape(B, 1, H, W)
    beta = ag.sigmoid((store["policy.mix_v"] * store["policy.task_emb"][ti]).sum() + store["policy.mix_c"][ti])
    phi = ag.softplus(store["policy.temporal"][ti]).reshape(1, T, 1, 1)
    raw = phi * beta + psi * (1.0 - beta)
    p = canonicalize(raw, cfg.p_floor, cand)
    if tau == "cold":
        p = mix_uniform(p, cfg.cold_epsilon, cand)
    return MaskField(fs, fl, ft, lam, z, rho, rel.scaling, budget, p, psi, cand)


def evidence_source(x0: np.ndarray, profiles: np.ndarray, tau: str) -> np.ndarray:
    """Cold start borrows evidence from the most similar peer in the batch."""
    return x0[peer_indices(profiles)] if tau == "cold" else x0


def batch_forward(store: ParameterStore, cfg: ModelConfig, x0: np.ndarray, profiles: np.ndarray,
                  tau: str, draws: BatchDraws, lambda_con: float, use_infonce: bool = True) -> StepResult:
    dtype = store.dtype
    x0 = np.asarray(x0, dtype=dtype)
    profiles = np.asarray(profiles, dtype=dtype)
    B = x0.shape[0]
    ti = task_index(tau)
    T, H, W = cfg.dims[1:]
    src = evidence_source(x0, profiles, tau)
    mf = mask_field(store, cfg, src, tau)
    p, budget, n_cand = mf.p, mf.budget, mf.n_candidates

    if draws.frozen_binary is not None:
        binary = draws.frozen_binary.astype(np.uint8)
    else:
        with np.errstate(divide="ignore"):
            g = np.log(p.data.reshape(B, -1)) + draws.gumbel.reshape(B, -1)
        binary = np.zeros((B, T * H * W), np.uint8)
        for b in range(B):
            binary[b, topk_indices(g[b], int(budget[b]))] = 1
        binary = binary.reshape(B, T, H, W)

    # straight-through: gradients reach p only at selected coordinates
    weights = p * (binary.astype(dtype) * n_cand)
    if cfg.prediction == "x0":
        x_t = forward_sample_batch(src, draws.steps, draws.noise.astype(dtype), _schedule(cfg))
        target = x0
    else:
        x_t = forward_sample_batch(x0, draws.steps, draws.noise.astype(dtype), _schedule(cfg))
        target = draws.noise.astype(dtype)
    x_in, ev_in = denoiser_inputs(x_t, binary, weights, src, cfg.prediction)

    task_emb = store["policy.task_emb"][ti].reshape(1, -1)
    _, _, glob = conditioning(store, mf.f_task, task_emb, profiles)
    pred = denoise_tokens(store, cfg, x_in, ev_in, draws.steps, glob)
    rec = mse(pred, target)
    if use_infonce:
        temp = ag.exp(store["infonce.log_temperature"])
        nce = infonce(mf.f_short, mf.f_long, temp)
        total = rec + nce * lambda_con
    else:
        nce = ag.Tensor(np.zeros((), dtype=dtype))
        total = rec
    return StepResult(total, rec, nce, np.full(B, mf.rho), mf.gamma, budget, binary, p, pred,
                      {"psi": mf.psi, "lambda": mf.lam, "z": mf.z})


_SCHEDULES: dict = {}


def _schedule(cfg: ModelConfig):
    key = (cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    if key not in _SCHEDULES:
        _SCHEDULES[key] = make_schedule(*key)
    return _SCHEDULES[key]


# optimizers --------------------------------------------------------------------

class Adam:
    def __init__(self, store: ParameterStore, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.store, self.lr, self.b1, self.b2, self.eps = store, lr, b1, b2, eps
        self.m = {k: np.zeros_like(v.data) for k, v in store.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in store.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.store.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = np.asarray(p.data - update, dtype=p.data.dtype)


class SGD:
    def __init__(self, store: ParameterStore, lr: float = 1e-3):
        self.store, self.lr = store, lr

    def step(self) -> None:
        for p in self.store.tensors():
            if p.grad is not None:
                p.data = np.asarray(p.data - self.lr * p.grad, dtype=p.data.dtype)


def make_optimizer(store: ParameterStore, tcfg: TrainConfig):
    if tcfg.optimizer == "sgd":
        return SGD(store, tcfg.learning_rate)
    return Adam(store, tcfg.learning_rate)


# epochs ------------------------------------------------------------------------

def batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = stream(seed, epoch, _STREAM_PERM).permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def batch_task(seed: int, epoch: int, batch_index: int) -> str:
    return TASKS[int(stream(seed, epoch, batch_index, _STREAM_TASK).integers(len(TASKS)))]


def augment_batch(x: np.ndarray, seed: int, epoch: int, batch_index: int,
                  slots_per_day: int = SLOTS_PER_DAY) -> np.ndarray:
    """One random grid symmetry and whole-day rotation shared by the batch.

    Without it the denoiser memorizes the training users' layouts through the
    conditioning vector instead of reading the evidence.
    """
    rng = stream(seed, epoch, batch_index, _STREAM_AUG)
    T, H, W = x.shape[-3:]
    k = int(rng.integers(4)) if H == W else 2 * int(rng.integers(2))
    flip = bool(rng.integers(2))
    shift = int(rng.integers(max(1, T // slots_per_day))) * slots_per_day
    out = np.rot90(x, k, axes=(-2, -1))
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(np.roll(out, shift, axis=-3))


def _diagnose(store: ParameterStore, loss_value: float) -> str:
    for name, t in store.items():
        if not np.all(np.isfinite(t.data)):
            return f"parameter {name!r} holds non-finite values"
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            return f"gradient of parameter {name!r} is non-finite"
    return f"loss evaluated to {loss_value!r} with all parameters finite"


def train_epoch(data: TrainingData, store: ParameterStore, cfg: ModelConfig, tcfg: TrainConfig,
                epoch: int, optimizer=None, use_infonce: bool = True,
                on_batch: Callable | None = None) -> dict:
    """Run one epoch; returns mean losses and mask statistics."""
    if len(data) < 2:
        raise ValueError("training needs at least two users")
    optimizer = optimizer or make_optimizer(store, tcfg)
    sums = {"loss_total": 0.0, "loss_rec": 0.0, "loss_infonce": 0.0, "mean_rho": 0.0, "mean_gamma": 0.0}
    n_batches = 0
    for bi, idx in enumerate(batches(len(data), tcfg.batch_size, tcfg.seed, epoch)):
        tau = batch_task(tcfg.seed, epoch, bi)
        draws = draw_batch(cfg, tcfg.seed, epoch, bi, data.user_ids[idx], tau)
        store.zero_grad()
        x = augment_batch(data.x[idx], tcfg.seed, epoch, bi) if tcfg.augment else data.x[idx]
        res = batch_forward(store, cfg, x, data.profiles[idx], tau, draws,
                            tcfg.lambda_con, use_infonce)
        loss = float(res.total.data)
        if not np.isfinite(loss):
            raise TrainingDivergence(f"non-finite loss at epoch {epoch} batch {bi}: "
                                     f"{_diagnose(store, loss)}")
        res.total.backward()
        for name, t in store.items():
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise TrainingDivergence(f"epoch {epoch} batch {bi}: gradient of {name!r} is non-finite")
        optimizer.step()
        sums["loss_total"] += loss
        sums["loss_rec"] += float(res.rec.data)
        sums["loss_infonce"] += float(res.nce.data)
        sums["mean_rho"] += float(np.mean(res.rho * res.gamma))
        sums["mean_gamma"] += float(np.mean(res.gamma))
        n_batches += 1
        if on_batch is not None:
            on_batch(epoch, bi, tau, res)
    out = {k: v / n_batches for k, v in sums.items()}
    out["epoch"] = epoch
    return out


def train(data: TrainingData, store: ParameterStore, cfg: ModelConfig, tcfg: TrainConfig,
          use_infonce: bool = True, log: Callable | None = None) -> list[dict]:
    optimizer = make_optimizer(store, tcfg)
    history = []
    for epoch in range(1, tcfg.epochs + 1):
        rec = train_epoch(data, store, cfg, tcfg, epoch, optimizer, use_infonce)
        history.append(rec)
        if log is not None:
            log(rec)
    return history


METRIC_FIELDS = ("epoch", "loss_total", "loss_rec", "loss_infonce", "mean_rho", "mean_gamma")


def write_metrics_log(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(METRIC_FIELDS)
        for rec in history:
            wr.writerow([rec["epoch"]] + [repr(float(rec[k])) for k in METRIC_FIELDS[1:]])


# gradient checking -------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict
    worst_index: dict
    failures: list
    tolerance: float

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def overall(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0


def grad_check(store: ParameterStore, loss_fn: Callable[[ParameterStore], Tensor], tolerance: float = 1e-4,
               max_entries: int = 64, step: float = 1e-5, seed: int = 0,
               names: list[str] | None = None, order: int = 2) -> GradCheckReport:
    """Compare tape gradients against central differences entry by entry.

    Arrays with more than ``max_entries`` entries are subsampled. ``order=4``
    uses the five-point stencil, which tolerates a larger ``step`` and so
    loses less to roundoff on tiny gradients.
    """
    if store.dtype != np.float64:
        raise ValueError("gradient checks need a 64-bit parameter store")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    store.zero_grad()
    loss = loss_fn(store)
    loss.backward()
    analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for k, t in store.items()}
    rng = np.random.default_rng(seed)
    max_err, worst, failures = {}, {}, []
    with ag.no_grad():
        for name in names or store.names():
            t = store[name]
            n = t.data.size
            picks = np.arange(n) if n <= max_entries else np.sort(rng.choice(n, max_entries, replace=False))
            errs = []
            for i in picks:
                at = np.unravel_index(i, t.shape)
                orig = t.data[at]

                def diff(h):
                    t.data[at] = orig + h
                    up = float(loss_fn(store).data)
                    t.data[at] = orig - h
                    down = float(loss_fn(store).data)
                    t.data[at] = orig
                    return up - down

                if order == 2:
                    fd = diff(step) / (2 * step)
                else:
                    fd = (8 * diff(step) - diff(2 * step)) / (12 * step)
                a = float(analytic[name].reshape(-1)[i])
                err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
                errs.append(err)
                if err > tolerance:
                    failures.append((name, np.unravel_index(i, t.shape), a, fd, err))
            j = int(np.argmax(errs)) if errs else 0
            max_err[name] = float(max(errs)) if errs else 0.0
            worst[name] = tuple(int(v) for v in np.unravel_index(picks[j], t.shape)) if errs else ()
    store.zero_grad()
    return GradCheckReport(max_err, worst, failures, tolerance)
