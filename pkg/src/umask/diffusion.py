"""Variance-preserving diffusion with a small spatio-temporal DiT denoiser.

The denoiser predicts the clean tensor (x0-parameterization). It reads the
mask-weighted noisy tensor as its token stream, attends to clean evidence
tokens by cross-attention, and is modulated by a global user+task vector via
adaptive layer norm. Reverse sampling clamps observed coordinates to the
evidence after every step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import TASKS, ConfigError, ModelConfig
from .params import ParameterStore
from .tensor import BehaviorTensor, EvidenceMask, ShapeError


@dataclass(frozen=True)
class DiffusionSchedule:
    horizon: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def at(self, t: int) -> tuple[float, float, float]:
        """(beta_t, alpha_t, alpha_bar_t) for 1-based step t."""
        if not 1 <= t <= self.horizon:
            raise ValueError(f"diffusion step {t} outside [1, {self.horizon}]")
        return float(self.beta[t - 1]), float(self.alpha[t - 1]), float(self.alpha_bar[t - 1])

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])


def make_schedule(horizon: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    if horizon < 1:
        raise ConfigError("horizon must be at least 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, horizon, dtype=np.float64)
    alpha = 1.0 - beta
    return DiffusionSchedule(horizon, beta, alpha, np.cumprod(alpha))


def forward_sample(x0, t: int, noise, sched: DiffusionSchedule):
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise`` (arrays or tensors)."""
    _, _, abar = sched.at(t)
    values = x0.values if isinstance(x0, BehaviorTensor) else np.asarray(x0)
    noise = np.asarray(noise)
    if noise.shape != values.shape:
        raise ShapeError(f"noise shape {noise.shape} does not match {values.shape}")
    out = np.sqrt(abar) * values + np.sqrt(1.0 - abar) * noise
    return BehaviorTensor(out, x0.channel_roles) if isinstance(x0, BehaviorTensor) else out


def forward_sample_batch(x0: np.ndarray, t: np.ndarray, noise: np.ndarray,
                         sched: DiffusionSchedule) -> np.ndarray:
    abar = sched.alpha_bar[np.asarray(t) - 1].reshape(-1, 1, 1, 1, 1).astype(x0.dtype)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


# patching --------------------------------------------------------------------

@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray
    layout: tuple[int, int, int]
    patch_dims: tuple[int, int, int]
    channels: int

    @property
    def length(self) -> int:
        return int(self.tokens.shape[0])


def _check_patch(dims: tuple, patch: tuple) -> tuple[int, int, int]:
    _, T, H, W = dims
    pt, ph, pw = patch
    if min(pt, ph, pw) < 1 or T % pt or H % ph or W % pw:
        raise ShapeError(f"patch {patch} does not divide tensor dims {dims}")
    return T // pt, H // ph, W // pw


def patchify_batch(x, patch: tuple):
    """(B, C, T, H, W) -> (B, L, C*t0*h0*w0); works on arrays and tensors."""
    B = x.shape[0]
    C, T, H, W = x.shape[1:]
    nt, nh, nw = _check_patch((C, T, H, W), patch)
    pt, ph, pw = patch
    if isinstance(x, Tensor):
        y = x.reshape(B, C, nt, pt, nh, ph, nw, pw).transpose(0, 2, 4, 6, 1, 3, 5, 7)
        return y.reshape(B, nt * nh * nw, C * pt * ph * pw)
    y = np.asarray(x).reshape(B, C, nt, pt, nh, ph, nw, pw).transpose(0, 2, 4, 6, 1, 3, 5, 7)
    return y.reshape(B, nt * nh * nw, C * pt * ph * pw)


def unpatchify_batch(tokens, dims: tuple, patch: tuple):
    C, T, H, W = dims
    nt, nh, nw = _check_patch(dims, patch)
    pt, ph, pw = patch
    B = tokens.shape[0]
    if isinstance(tokens, Tensor):
        y = tokens.reshape(B, nt, nh, nw, C, pt, ph, pw).transpose(0, 4, 1, 5, 2, 6, 3, 7)
        return y.reshape(B, C, T, H, W)
    y = np.asarray(tokens).reshape(B, nt, nh, nw, C, pt, ph, pw).transpose(0, 4, 1, 5, 2, 6, 3, 7)
    return y.reshape(B, C, T, H, W)


def patchify(x: BehaviorTensor | np.ndarray, patch_dims: tuple) -> TokenSequence:
    values = x.values if isinstance(x, BehaviorTensor) else np.asarray(x)
    layout = _check_patch(values.shape, patch_dims)
    tokens = patchify_batch(values[None], patch_dims)[0]
    return TokenSequence(tokens, layout, tuple(patch_dims), values.shape[0])


def unpatchify(seq: TokenSequence) -> BehaviorTensor:
    nt, nh, nw = seq.layout
    pt, ph, pw = seq.patch_dims
    dims = (seq.channels, nt * pt, nh * ph, nw * pw)
    return BehaviorTensor(unpatchify_batch(seq.tokens[None], dims, seq.patch_dims)[0])


# denoiser -------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditioningBundle:
    user_vec: np.ndarray
    task_vec: np.ndarray
    global_vec: np.ndarray
    evidence_tokens: TokenSequence | None = None


def timestep_features(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def sinusoidal_positions(L: int, D: int) -> np.ndarray:
    pos = np.arange(L, dtype=np.float64)[:, None]
    i = np.arange(D // 2, dtype=np.float64)[None]
    ang = pos / (10000.0 ** (2 * i / D))
    out = np.zeros((L, D))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def factorized_positions(grid: tuple[int, int, int], D: int) -> np.ndarray:
    """Concatenated sinusoidal codes: time in the first half, rows and columns after.

    Tokens at the same spatial patch share the second half exactly, which
    makes attending to one place across time an easy pattern to learn.
    """
    gt, gh, gw = grid
    dt = D // 2
    dh = (D - dt) // 2
    dw = D - dt - dh
    t, h, w = np.meshgrid(np.arange(gt), np.arange(gh), np.arange(gw), indexing="ij")
    parts = [sinusoidal_positions(n, d)[idx.ravel()] for n, d, idx in ((gt, dt, t), (gh, dh, h), (gw, dw, w))]
    return np.concatenate(parts, axis=1)


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_denoiser(store: ParameterStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    C = cfg.dims[0]
    pt, ph, pw = cfg.patch
    P = C * pt * ph * pw
    P_ev = (C + 1) * pt * ph * pw
    D = cfg.model_dim
    store.add("dit.x_w", _glorot(rng, P, D))
    store.add("dit.x_b", np.zeros(D))
    store.add("dit.ev_w", _glorot(rng, P_ev, D))
    store.add("dit.ev_b", np.zeros(D))
    grid = tuple(n // p for n, p in zip(cfg.dims[1:], cfg.patch))
    store.add("dit.pos", factorized_positions(grid, D))
    store.add("dit.t_w1", _glorot(rng, D, D))
    store.add("dit.t_b1", np.zeros(D))
    store.add("dit.t_w2", _glorot(rng, D, D))
    store.add("dit.t_b2", np.zeros(D))
    store.add("dit.user_w", _glorot(rng, cfg.d_task, D))
    store.add("dit.profile_w", _glorot(rng, cfg.profile_dim, D))
    store.add("dit.task_w", _glorot(rng, cfg.d, D))
    for i in range(cfg.blocks):
        p = f"dit.block{i}."
        store.add(p + "mod_w", np.zeros((D, 9 * D)))
        store.add(p + "mod_b", np.zeros(9 * D))
        store.add(p + "qkv_w", _glorot(rng, D, 3 * D))
        store.add(p + "qkv_b", np.zeros(3 * D))
        store.add(p + "attn_w", _glorot(rng, D, D))
        store.add(p + "attn_b", np.zeros(D))
        store.add(p + "xq_w", _glorot(rng, D, D))
        store.add(p + "xkv_w", _glorot(rng, D, 2 * D))
        store.add(p + "xo_w", _glorot(rng, D, D))
        store.add(p + "xo_b", np.zeros(D))
        store.add(p + "mlp_w1", _glorot(rng, D, 4 * D))
        store.add(p + "mlp_b1", np.zeros(4 * D))
        store.add(p + "mlp_w2", _glorot(rng, 4 * D, D))
        store.add(p + "mlp_b2", np.zeros(D))
    store.add("dit.final_mod_w", np.zeros((D, 2 * D)))
    store.add("dit.final_mod_b", np.zeros(2 * D))
    store.add("dit.out_w", np.zeros((D, P)))
    store.add("dit.out_b", np.zeros(P))


def conditioning(store: ParameterStore, f_task, task_emb, profile=None) -> tuple[Tensor, Tensor, Tensor]:
    """(user_vec, task_vec, global) with ``global = user_vec + task_vec``."""
    user = ag.linear(f_task, store["dit.user_w"])
    if profile is not None:
        user = user + ag.linear(profile, store["dit.profile_w"])
    task = ag.linear(task_emb, store["dit.task_w"])
    return user, task, user + task


def _heads(x: Tensor, n_heads: int) -> Tensor:
    B, L, D = x.shape
    return x.reshape(B, L, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def _merge(x: Tensor) -> Tensor:
    B, nh, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, nh * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    qh, kh, vh = _heads(q, n_heads), _heads(k, n_heads), _heads(v, n_heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    att = ag.softmax(ag.matmul(qh, kh.swapaxes(2, 3)) * scale, axis=-1)
    return _merge(ag.matmul(att, vh))


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    B, D = shift.shape
    return x * (scale.reshape(B, 1, D) + 1.0) + shift.reshape(B, 1, D)


def _gate(g: Tensor) -> Tensor:
    # gates start open at one; only the output head starts at zero
    return g.reshape(g.shape[0], 1, g.shape[1]) + 1.0


def denoise_tokens(store: ParameterStore, cfg: ModelConfig, x_in, evidence_in, t,
                   global_vec, positions=None) -> Tensor:
    """Core DiT pass on pre-built inputs.

    ``x_in`` is (B, C, T, H, W), ``evidence_in`` is (B, C+1, T, H, W) holding
    the evidence values and the binary plane, ``t`` holds 1-based steps.
    ``positions`` optionally overrides the positional table (B, L, D) or (L, D).
    """
    D, nh = cfg.model_dim, cfg.heads
    x_tok = ag.linear(patchify_batch(ag.as_tensor(x_in), cfg.patch), store["dit.x_w"], store["dit.x_b"])
    ev_tok = ag.linear(patchify_batch(ag.as_tensor(evidence_in), cfg.patch), store["dit.ev_w"], store["dit.ev_b"])
    pos = store["dit.pos"] if positions is None else positions
    B = x_tok.shape[0]
    t_feat = timestep_features(t, D).astype(x_tok.dtype)
    t_emb = ag.linear(ag.silu(ag.linear(t_feat, store["dit.t_w1"], store["dit.t_b1"])),
                      store["dit.t_w2"], store["dit.t_b2"])
    h = x_tok + pos + t_emb.reshape(B, 1, D)
    ev = ev_tok + pos
    c = ag.silu(ag.as_tensor(global_vec))
    for i in range(cfg.blocks):
        p = f"dit.block{i}."
        mod = ag.linear(c, store[p + "mod_w"], store[p + "mod_b"])
        parts = [mod[:, j * D:(j + 1) * D] for j in range(9)]
        sh1, sc1, g1, sh2, sc2, g2, sh3, sc3, g3 = parts

        a = _modulate(ag.layer_norm(h), sh1, sc1)
        qkv = ag.linear(a, store[p + "qkv_w"], store[p + "qkv_b"])
        q, k, v = qkv[:, :, :D], qkv[:, :, D:2 * D], qkv[:, :, 2 * D:]
        h = h + _gate(g1) * ag.linear(attention(q, k, v, nh), store[p + "attn_w"], store[p + "attn_b"])

        a = _modulate(ag.layer_norm(h), sh2, sc2)
        q = ag.linear(a, store[p + "xq_w"])
        kv = ag.linear(ag.layer_norm(ev), store[p + "xkv_w"])
        k, v = kv[:, :, :D], kv[:, :, D:]
        h = h + _gate(g2) * ag.linear(attention(q, k, v, nh), store[p + "xo_w"], store[p + "xo_b"])

        a = _modulate(ag.layer_norm(h), sh3, sc3)
        m = ag.linear(ag.gelu(ag.linear(a, store[p + "mlp_w1"], store[p + "mlp_b1"])),
                      store[p + "mlp_w2"], store[p + "mlp_b2"])
        h = h + _gate(g3) * m
    fm = ag.linear(c, store["dit.final_mod_w"], store["dit.final_mod_b"])
    h = _modulate(ag.layer_norm(h), fm[:, :D], fm[:, D:])
    out = ag.linear(h, store["dit.out_w"], store["dit.out_b"])
    return unpatchify_batch(out, ag.as_tensor(x_in).shape[1:], cfg.patch)


def denoiser_inputs(x_t, binary, weights, evidence, prediction: str = "x0"):
    """Assemble (x_in, evidence_in) from state, mask planes and evidence.

    ``weights`` are the importance weights rescaled so a uniform field gives
    one per selected coordinate. Under x0-prediction the token stream only
    carries the weighted observed entries; eps-prediction sees the full state.
    """
    binary = np.asarray(binary)
    b5 = binary[:, None].astype(np.float64 if not isinstance(x_t, Tensor) else x_t.dtype)
    if prediction == "x0":
        w5 = weights.reshape(weights.shape[0], 1, *weights.shape[1:]) if isinstance(weights, Tensor) \
            else np.asarray(weights)[:, None]
        x_in = ag.as_tensor(x_t) * w5
    else:
        x_in = ag.as_tensor(x_t)
    ev = np.concatenate([np.asarray(evidence) * b5, b5], axis=1)
    return x_in, ev.astype(x_in.dtype)


def denoise(store: ParameterStore, cfg: ModelConfig, x_t, bundle: ConditioningBundle, t: int,
            mask: EvidenceMask, x_evidence) -> np.ndarray:
    """Clean-tensor prediction for a single user (no gradient)."""
    values = x_t.values if isinstance(x_t, BehaviorTensor) else np.asarray(x_t)
    ev = x_evidence.values if isinstance(x_evidence, BehaviorTensor) else np.asarray(x_evidence)
    n_cand = mask.binary.size
    with ag.no_grad():
        x_in, ev_in = denoiser_inputs(values[None].astype(store.dtype), mask.binary[None],
                                      (mask.weights * n_cand)[None].astype(store.dtype),
                                      ev[None].astype(store.dtype), cfg.prediction)
        out = denoise_tokens(store, cfg, x_in, ev_in, np.array([t]),
                             bundle.global_vec[None].astype(store.dtype))
    return out.data[0]


def clamp(state: np.ndarray, binary: np.ndarray, evidence: np.ndarray) -> np.ndarray:
    """Overwrite observed coordinates (broadcast over channels) with evidence."""
    m = np.asarray(binary, dtype=bool)[:, None] if state.ndim == 5 else np.asarray(binary, dtype=bool)[None]
    return np.where(m, evidence, state)


def posterior_step(x0_hat: np.ndarray, x_t: np.ndarray, t: int, sched: DiffusionSchedule,
                   noise: np.ndarray) -> np.ndarray:
    beta, alpha, abar = sched.at(t)
    abar_prev = sched.alpha_bar_prev(t)
    c0 = np.sqrt(abar_prev) * beta / (1.0 - abar)
    ct = np.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
    mean = c0 * x0_hat + ct * x_t
    if t == 1:
        return mean
    var = beta * (1.0 - abar_prev) / (1.0 - abar)
    return mean + np.sqrt(var) * noise


def reverse_sample_batch(store: ParameterStore, cfg: ModelConfig, binary: np.ndarray,
                         weights: np.ndarray, evidence: np.ndarray, global_vec: np.ndarray,
                         sched: DiffusionSchedule, rngs, on_step: Callable | None = None) -> np.ndarray:
    """Evidence-clamped ancestral sampling for a batch.

    ``weights`` are rescaled importance weights (see ``denoiser_inputs``);
    ``rngs`` is one generator per batch member so results do not depend on
    batch composition. ``on_step(t, state)`` sees the clamped state after
    every step, ``t = T_d`` being the initial draw.
    """
    dtype = np.result_type(store.dtype, evidence.dtype)
    B = evidence.shape[0]
    shape = evidence.shape[1:]
    evidence = evidence.astype(dtype)
    state = np.stack([r.standard_normal(shape) for r in rngs]).astype(dtype)
    state = clamp(state, binary, evidence)
    if on_step is not None:
        on_step(sched.horizon, state)
    gvec = np.asarray(global_vec, dtype=dtype)
    w = np.asarray(weights, dtype=dtype)
    with ag.no_grad():
        for t in range(sched.horizon, 0, -1):
            x_in, ev_in = denoiser_inputs(state, binary, w, evidence, cfg.prediction)
            pred = denoise_tokens(store, cfg, x_in, ev_in, np.full(B, t), gvec).data
            if cfg.prediction == "eps":
                _, _, abar = sched.at(t)
                pred = (state - np.sqrt(1.0 - abar) * pred) / np.sqrt(abar)
            x0_hat = np.clip(pred, 0.0, 1.0)
            noise = np.stack([r.standard_normal(shape) for r in rngs]).astype(dtype)
            proposal = posterior_step(x0_hat, state, t, sched, noise).astype(dtype)
            state = clamp(proposal, binary, evidence)
            if on_step is not None:
                on_step(t - 1, state)
    return state


def reverse_sample(store: ParameterStore, cfg: ModelConfig, mask: EvidenceMask, x_evidence,
                   bundle: ConditioningBundle, sched: DiffusionSchedule, rng_seed,
                   on_step: Callable | None = None) -> BehaviorTensor:
    """Single-user completion; observed coordinates equal the evidence exactly."""
    ev = x_evidence.values if isinstance(x_evidence, BehaviorTensor) else np.asarray(x_evidence)
    if ev.shape[1:] != mask.dims:
        raise ShapeError("mask dims do not match evidence dims")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    out = reverse_sample_batch(store, cfg, mask.binary[None], (mask.weights * mask.binary.size)[None],
                               ev[None], bundle.global_vec[None], sched, [rng],
                               None if on_step is None else (lambda t, s: on_step(t, s[0])))
    return BehaviorTensor(out[0])


def make_bundle(store: ParameterStore, cfg: ModelConfig, f_task: np.ndarray, tau: str,
                profile: np.ndarray | None = None, evidence=None) -> ConditioningBundle:
    i = TASKS.index(tau)
    with ag.no_grad():
        user, task, glob = conditioning(store, np.asarray(f_task, dtype=store.dtype)[None],
                                        store["policy.task_emb"].data[i][None],
                                        None if profile is None else np.asarray(profile, dtype=store.dtype)[None])
    ev_tokens = None if evidence is None else patchify(evidence, cfg.patch)
    return ConditioningBundle(user.data[0], task.data[0], glob.data[0], ev_tokens)
