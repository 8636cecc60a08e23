"""Behavioral encoder and the hierarchical latent chain.

Functions take a ``ParameterStore`` plus batched inputs and return
``Tensor`` values so they can sit on the gradient tape. Plain numpy inputs
work too; wrap parameters in ``no_grad`` for pure evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import TASKS, ConfigError, ModelConfig, task_index
from .params import ParameterStore


@dataclass(frozen=True)
class UserLatents:
    h: np.ndarray
    f_short: np.ndarray
    f_long: np.ndarray
    f_pat: np.ndarray
    f_task: np.ndarray
    lambda_profile: np.ndarray
    z_refined: np.ndarray


@dataclass(frozen=True)
class LocationEmbeddingTable:
    embeddings: np.ndarray
    grid: tuple[int, int]

    def row(self, h: int, w: int) -> np.ndarray:
        return self.embeddings[h * self.grid[1] + w]


def sinusoidal_grid_code(H: int, W: int, d: int) -> np.ndarray:
    """2-D sinusoidal position code: half the features encode rows, half columns."""
    half = d // 2
    out = np.zeros((H * W, d))
    for axis, (n, offset, width) in enumerate(((H, 0, half), (W, half, d - half))):
        pos = np.arange(n, dtype=np.float64)
        k = np.arange(width // 2, dtype=np.float64)
        freq = 1.0 / (10.0 ** (k / max(1, width // 2)))
        code = np.zeros((n, width))
        code[:, 0:2 * len(k):2] = np.sin(np.outer(pos + 1.0, freq))
        code[:, 1:2 * len(k):2] = np.cos(np.outer(pos + 1.0, freq))
        if width % 2:
            code[:, -1] = (pos + 1.0) / n
        for h in range(H):
            for w in range(W):
                idx = h if axis == 0 else w
                out[h * W + w, offset:offset + width] = code[idx]
    return out


def _glorot(rng, fan_in, fan_out, shape=None):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


def init_encoder(store: ParameterStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    C, T, H, W = cfg.dims
    d, dt, hid, R = cfg.d, cfg.d_task, cfg.enc_hidden, cfg.hier_tokens
    n_in = C * T + C * H * W
    store.add("enc.w1", _glorot(rng, n_in, hid))
    store.add("enc.b1", np.zeros(hid))
    store.add("enc.w2", _glorot(rng, hid, hid))
    store.add("enc.b2", np.zeros(hid))
    store.add("enc.wo", _glorot(rng, hid, d))
    store.add("enc.bo", np.zeros(d))

    store.add("hier.expand", _glorot(rng, d, R * d))
    store.add("hier.slots", rng.standard_normal((3, d)))
    store.add("hier.wq", _glorot(rng, d, d))
    store.add("hier.wk", _glorot(rng, d, d))
    store.add("hier.wv", _glorot(rng, d, d))
    store.add("hier.wo", _glorot(rng, d, d))
    store.add("hier.bo", np.zeros((3, d)))

    n_tasks = len(TASKS)
    store.add("proj.w", np.stack([_glorot(rng, 3 * d, dt) for _ in range(n_tasks)]))
    store.add("proj.b", np.zeros((n_tasks, dt)))
    store.add("sens.w", np.stack([_glorot(rng, dt, dt) for _ in range(n_tasks)]))
    store.add("sens.b", np.zeros((n_tasks, dt)))
    store.add("refine.w1", np.stack([_glorot(rng, d, d) for _ in range(n_tasks)]))
    store.add("refine.b1", np.zeros((n_tasks, d)))
    store.add("refine.w2", np.stack([0.1 * _glorot(rng, d, d) for _ in range(n_tasks)]))
    store.add("refine.b2", np.zeros((n_tasks, d)))

    store.add("loc.emb", sinusoidal_grid_code(H, W, d))


def behavior_summary(x) -> Tensor:
    """Per-(channel, slot) spatial means followed by per-(channel, cell) temporal means."""
    x = ag.as_tensor(x)
    B = x.shape[0]
    C, T, H, W = x.shape[1:]
    per_slot = x.reshape(B, C, T, H * W).mean(axis=3).reshape(B, C * T)
    per_cell = x.mean(axis=2).reshape(B, C * H * W)
    return ag.concat([per_slot, per_cell], axis=1)


def encode_behavior(store: ParameterStore, x) -> Tensor:
    """Map a (B, C, T, H, W) batch to user embeddings h of shape (B, d)."""
    s = behavior_summary(x)
    a = ag.tanh(ag.linear(s, store["enc.w1"], store["enc.b1"]))
    a = ag.tanh(ag.linear(a, store["enc.w2"], store["enc.b2"]))
    return ag.linear(a, store["enc.wo"], store["enc.bo"])


def disentangle(store: ParameterStore, h) -> tuple[Tensor, Tensor, Tensor]:
    """Three query slots attend over a token re-expansion of h."""
    h = ag.as_tensor(h)
    B, d = h.shape
    R = store["hier.expand"].shape[1] // d
    tokens = ag.linear(h, store["hier.expand"]).reshape(B, R, d)
    q = ag.linear(store["hier.slots"], store["hier.wq"])                # (3, d)
    k = ag.linear(tokens, store["hier.wk"])                            # (B, R, d)
    v = ag.linear(tokens, store["hier.wv"])
    att = ag.softmax(ag.matmul(q, k.swapaxes(1, 2)) * (1.0 / np.sqrt(d)), axis=-1)  # (B, 3, R)
    out = ag.linear(ag.matmul(att, v), store["hier.wo"]) + store["hier.bo"]
    return out[:, 0, :], out[:, 1, :], out[:, 2, :]


def _task_ids(tau, B: int) -> np.ndarray:
    if isinstance(tau, str):
        return np.full(B, task_index(tau))
    ids = np.asarray(tau, dtype=np.int64)
    if ids.shape != (B,) or ids.min() < 0 or ids.max() >= len(TASKS):
        raise ConfigError(f"bad task ids {tau!r}")
    return ids


def _per_task_linear(x: Tensor, w: Tensor, b: Tensor, ids: np.ndarray) -> Tensor:
    if np.all(ids == ids[0]):
        return ag.linear(x, w[int(ids[0])], b[int(ids[0])])
    out = ag.matmul(x.reshape(x.shape[0], 1, x.shape[1]), w[ids])
    return out.reshape(x.shape[0], w.shape[2]) + b[ids]


def task_project(store: ParameterStore, f_short, f_long, f_pat, tau) -> Tensor:
    f_short = ag.as_tensor(f_short)
    cat = ag.concat([f_short, ag.as_tensor(f_long), ag.as_tensor(f_pat)], axis=1)
    ids = _task_ids(tau, f_short.shape[0])
    return _per_task_linear(cat, store["proj.w"], store["proj.b"], ids)


def sensitivity_from_output(g, eps: float) -> tuple[Tensor, Tensor]:
    """Fisher-diagonal proxy ``g*g + eps`` and its square root."""
    g = ag.as_tensor(g)
    diag = g * g + eps
    return diag, ag.sqrt(diag)


def sensitivity(store: ParameterStore, f_task, tau, eps: float) -> tuple[Tensor, Tensor]:
    f_task = ag.as_tensor(f_task)
    ids = _task_ids(tau, f_task.shape[0])
    g = _per_task_linear(f_task, store["sens.w"], store["sens.b"], ids)
    return sensitivity_from_output(g, eps)


def refine_steps(z0, delta, steps: int, eta: float):
    """Unrolled residual refinement ``z <- z + eta * delta(z)``."""
    if steps < 0 or eta <= 0:
        raise ConfigError("refinement needs steps >= 0 and eta > 0")
    z = z0
    for _ in range(steps):
        z = z + delta(z) * eta
    return z


def refine_pattern(store: ParameterStore, f_pat, tau, steps: int, eta: float) -> Tensor:
    f_pat = ag.as_tensor(f_pat)
    ids = _task_ids(tau, f_pat.shape[0])

    def delta(z):
        a = ag.tanh(_per_task_linear(z, store["refine.w1"], store["refine.b1"], ids))
        return _per_task_linear(a, store["refine.w2"], store["refine.b2"], ids)

    return refine_steps(f_pat, delta, steps, eta)


def location_table(store: ParameterStore, grid: tuple[int, int]) -> LocationEmbeddingTable:
    return LocationEmbeddingTable(store["loc.emb"].data.copy(), grid)


def user_latents(store: ParameterStore, cfg: ModelConfig, x, tau) -> UserLatents:
    """Evaluate the full latent chain without recording gradients."""
    with ag.no_grad():
        h = encode_behavior(store, x)
        fs, fl, fp = disentangle(store, h)
        ft = task_project(store, fs, fl, fp, tau)
        _, lam = sensitivity(store, ft, tau, cfg.fisher_eps)
        z = refine_pattern(store, fp, tau, cfg.refine_steps, cfg.refine_eta)
    return UserLatents(h.data, fs.data, fl.data, fp.data, ft.data, lam.data, z.data)
