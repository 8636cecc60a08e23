import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from umask import autograd as ag
from umask.config import ConfigError
from umask.diffusion import (conditioning, denoise, denoise_tokens, denoiser_inputs, forward_sample,
                             make_bundle, make_schedule, patchify, patchify_batch, posterior_step,
                             reverse_sample, unpatchify, unpatchify_batch)
from umask.tensor import BehaviorTensor, EvidenceMask, ShapeError
from umask.training import grad_check, init_params


def _perturbed(store, scale=0.05, seed=1):
    r = np.random.default_rng(seed)
    for _, t in store.items():
        t.data = np.asarray(t.data + scale * r.standard_normal(t.shape), dtype=t.data.dtype)
    return store


# schedule ---------------------------------------------------------------------------

def test_single_step_schedule():
    s = make_schedule(1, 0.1, 0.1)
    np.testing.assert_allclose(s.alpha_bar, [0.9], rtol=0, atol=1e-15)


def test_near_zero_beta():
    s = make_schedule(20, 1e-12, 1e-12)
    assert np.abs(s.alpha_bar - 1).max() < 1e-9


def test_linear_schedule_products():
    s = make_schedule(50, 1e-4, 0.02)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.beta[0] == 1e-4 and s.beta[-1] == pytest.approx(0.02, abs=1e-15)
    direct = 1.0
    for t in range(50):
        direct *= 1.0 - (1e-4 + t * (0.02 - 1e-4) / 49)
        assert abs(direct - s.alpha_bar[t]) < 1e-12
    assert abs(math.prod(1.0 - b for b in s.beta) - s.alpha_bar[-1]) < 1e-12


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


# forward process ----------------------------------------------------------------------

def test_forward_zero_noise(rng):
    s = make_schedule(50, 1e-4, 0.02)
    x0 = rng.random((2, 4, 2, 2))
    out = forward_sample(x0, 17, np.zeros_like(x0), s)
    assert np.array_equal(out, math.sqrt(s.alpha_bar[16]) * x0)


def test_forward_degenerate_alpha_bar_one(rng):
    s = make_schedule(3, 1e-300, 1e-300)
    x0 = rng.random((1, 2, 2, 2))
    np.testing.assert_array_equal(forward_sample(x0, 2, rng.standard_normal(x0.shape), s), x0)


def test_forward_behavior_tensor_and_errors(rng):
    s = make_schedule(5, 1e-3, 0.01)
    x = BehaviorTensor(rng.random((1, 2, 2, 2)))
    assert isinstance(forward_sample(x, 1, np.zeros((1, 2, 2, 2)), s), BehaviorTensor)
    with pytest.raises(ValueError):
        forward_sample(x, 0, np.zeros((1, 2, 2, 2)), s)
    with pytest.raises(ValueError):
        forward_sample(x, 6, np.zeros((1, 2, 2, 2)), s)
    with pytest.raises(ShapeError):
        forward_sample(x, 1, np.zeros((1, 2, 2, 1)), s)


@pytest.mark.parametrize("t", [1, 25, 50])
def test_forward_moments(t):
    s = make_schedule(50, 1e-4, 0.02)
    r = np.random.default_rng(t)
    x0 = r.random((1, 2, 2, 2))
    n = 10_000
    draws = np.stack([forward_sample(x0, t, r.standard_normal(x0.shape), s) for _ in range(n)])
    abar = s.alpha_bar[t - 1]
    sigma = math.sqrt(1 - abar)
    assert np.all(np.abs(draws.mean(0) - math.sqrt(abar) * x0) <= 4 * sigma / math.sqrt(n))
    assert np.all(np.abs(draws.var(0) / (1 - abar) - 1) < 0.1)


def test_variance_preserving():
    s = make_schedule(50, 1e-4, 0.02)
    r = np.random.default_rng(0)
    x0 = r.standard_normal((20_000,))
    xt = forward_sample(x0, 30, r.standard_normal(x0.shape), s)
    assert abs(xt.var() - 1) < 0.1


# patches -------------------------------------------------------------------------------

@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_patch_round_trip(seed):
    x = np.random.default_rng(seed).random((3, 8, 4, 6)).astype(np.float32)
    seq = patchify(x, (4, 2, 3))
    assert seq.length == 2 * 2 * 2
    assert unpatchify(seq).values.tobytes() == x.tobytes()


def test_patch_full_dims_single_token(rng):
    x = rng.random((2, 4, 2, 2))
    assert patchify(x, (4, 2, 2)).length == 1


def test_default_token_count(rng):
    seq = patchify(rng.random((3, 32, 8, 8)), (4, 2, 2))
    assert seq.length == 128 and seq.tokens.shape == (128, 3 * 16)


def test_patch_content_layout():
    x = np.arange(2 * 4 * 2 * 2, dtype=np.float64).reshape(2, 4, 2, 2)
    tok = patchify(x, (2, 1, 2)).tokens
    # first token: channel-major flattening of x[:, 0:2, 0, 0:2]
    np.testing.assert_array_equal(tok[0], x[:, 0:2, 0:1, 0:2].ravel())


def test_indivisible_patch():
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 5, 2, 2)), (2, 1, 1))


def test_batch_patch_tensor_path(rng):
    x = rng.random((2, 2, 8, 4, 4))
    t = patchify_batch(ag.Tensor(x), (4, 2, 2))
    np.testing.assert_array_equal(t.data, patchify_batch(x, (4, 2, 2)))
    np.testing.assert_array_equal(unpatchify_batch(t, x.shape[1:], (4, 2, 2)).data, x)


# denoiser -------------------------------------------------------------------------------

def _mask(dims, rng, frac=0.3):
    return EvidenceMask.from_binary((rng.random(dims) < frac).astype(np.uint8))


def test_conditioning_additive(small_cfg, small_store, rng):
    with ag.no_grad():
        u, t, g = conditioning(small_store, rng.standard_normal((2, small_cfg.d_task)),
                               small_store["policy.task_emb"].data[:1], rng.standard_normal((2, 8)))
    assert np.array_equal(g.data, u.data + t.data)


def test_denoise_deterministic(small_cfg, small_store, rng):
    _perturbed(small_store)
    b = make_bundle(small_store, small_cfg, rng.standard_normal(small_cfg.d_task), "short")
    x = rng.standard_normal(small_cfg.dims)
    m = _mask(small_cfg.dims[1:], rng)
    ev = x * m.binary[None]
    a1 = denoise(small_store, small_cfg, x, b, 3, m, ev)
    a2 = denoise(small_store, small_cfg, x, b, 3, m, ev)
    assert np.array_equal(a1, a2)


def test_zero_head_gives_zero_output(small_cfg, small_store, rng):
    d = small_cfg.model_dim
    b = make_bundle(small_store, small_cfg, np.zeros(small_cfg.d_task), "long")
    b = type(b)(np.zeros(d), np.zeros(d), np.zeros(d))
    x = rng.standard_normal(small_cfg.dims)
    out = denoise(small_store, small_cfg, x, b, 2, _mask(small_cfg.dims[1:], rng), x)
    assert np.array_equal(out, np.zeros_like(out))


def test_denoiser_gradients_match_finite_differences(small_cfg, small_store, rng):
    store = _perturbed(small_store, 0.5)   # O(1) outputs keep difference noise far below the floor
    B = 2
    x = rng.standard_normal((B,) + small_cfg.dims)
    binary = (rng.random((B,) + small_cfg.dims[1:]) < 0.4).astype(np.uint8)
    gvec = rng.standard_normal((B, small_cfg.model_dim))

    def loss(s):
        x_in, ev = denoiser_inputs(x, binary, binary.astype(np.float64), x, "x0")
        out = denoise_tokens(s, small_cfg, x_in, ev, np.array([1, 4]), gvec)
        return (out * out).mean()

    # qkv biases include the key bias, whose gradient is exactly zero (softmax
    # is shift invariant); differences there are pure roundoff, so check it apart
    names = [n for n in store.names() if n.startswith("dit.")
             and not n.endswith(("user_w", "profile_w", "task_w", "qkv_b"))]
    rep = grad_check(store, loss, 1e-4, max_entries=12, names=names)
    assert rep.ok, rep.failures[:3]
    D = small_cfg.model_dim
    store.zero_grad()
    loss(store).backward()
    for i in range(small_cfg.blocks):
        g = store[f"dit.block{i}.qkv_b"].grad
        assert np.abs(g[D:2 * D]).max() < 1e-12
        assert np.abs(g[:D]).max() > 1e-6 and np.abs(g[2 * D:]).max() > 1e-6


def test_permuting_tokens_with_positions_permutes_output(small_cfg, small_store, rng):
    store = _perturbed(small_store, 0.2)
    patch, dims = small_cfg.patch, small_cfg.dims
    x = rng.standard_normal((1,) + dims)
    ev = np.concatenate([x, (rng.random((1, 1) + dims[1:]) < 0.5).astype(np.float64)], axis=1)
    gvec = rng.standard_normal((1, small_cfg.model_dim))
    pos = store["dit.pos"].data
    L = pos.shape[0]
    perm = rng.permutation(L)

    def shuffle(a):
        toks = patchify_batch(a, patch)[:, perm]
        return unpatchify_batch(toks, a.shape[1:], patch)

    with ag.no_grad():
        base = denoise_tokens(store, small_cfg, x, ev, np.array([2]), gvec).data
        moved = denoise_tokens(store, small_cfg, shuffle(x), shuffle(ev), np.array([2]), gvec,
                               positions=pos[perm]).data
    np.testing.assert_allclose(patchify_batch(moved, patch), patchify_batch(base, patch)[:, perm], atol=1e-6)


# reverse sampling -----------------------------------------------------------------------

def _sampler_setup(cfg, store, rng):
    _perturbed(store, 0.1)
    b = make_bundle(store, cfg, rng.standard_normal(cfg.d_task), "short")
    sched = make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    return b, sched


def test_full_mask_returns_evidence(small_cfg, small_store, rng):
    b, sched = _sampler_setup(small_cfg, small_store, rng)
    ev = rng.random(small_cfg.dims)
    out = reverse_sample(small_store, small_cfg, EvidenceMask.full(small_cfg.dims[1:]), ev, b, sched, 3)
    assert out.values.tobytes() == ev.tobytes()


def test_empty_mask_is_pure_generation(small_cfg, small_store, rng):
    b, sched = _sampler_setup(small_cfg, small_store, rng)
    m = EvidenceMask.empty(small_cfg.dims[1:])
    a = reverse_sample(small_store, small_cfg, m, np.zeros(small_cfg.dims), b, sched, 11)
    c = reverse_sample(small_store, small_cfg, m, rng.random(small_cfg.dims), b, sched, 11)
    assert a == c
    b2 = make_bundle(small_store, small_cfg, rng.standard_normal(small_cfg.d_task), "short")
    assert reverse_sample(small_store, small_cfg, m, np.zeros(small_cfg.dims), b2, sched, 11) != a


def test_x0_sampler_ignores_noise_outside_evidence(small_cfg, small_store, rng):
    # the x0 denoiser reads only weighted observed entries, so the final
    # posterior mean is the same for every seed
    b, sched = _sampler_setup(small_cfg, small_store, rng)
    m = _mask(small_cfg.dims[1:], rng)
    ev = rng.random(small_cfg.dims) * m.binary[None]
    a = reverse_sample(small_store, small_cfg, m, ev, b, sched, 1)
    c = reverse_sample(small_store, small_cfg, m, ev, b, sched, 2)
    assert a == c


@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
@settings(max_examples=10, deadline=None)
def test_clamp_holds_at_every_step(seed, frac):
    from conftest import SMALL as cfg
    store = init_params(cfg, seed % 7)
    r = np.random.default_rng(seed)
    b, sched = _sampler_setup(cfg, store, r)
    m = _mask(cfg.dims[1:], r, frac)
    ev = r.random(cfg.dims) * m.binary[None]
    sel = np.broadcast_to(m.binary[None].astype(bool), cfg.dims)
    steps = []

    def check(t, state):
        steps.append(t)
        assert state[sel].tobytes() == ev[sel].tobytes()

    out = reverse_sample(store, cfg, m, ev, b, sched, seed, on_step=check)
    assert steps == list(range(cfg.diffusion_steps, -1, -1))
    assert out.values[sel].tobytes() == ev[sel].tobytes()


def test_reverse_mask_shape_mismatch(small_cfg, small_store, rng):
    b, sched = _sampler_setup(small_cfg, small_store, rng)
    with pytest.raises(ShapeError):
        reverse_sample(small_store, small_cfg, EvidenceMask.empty((2, 2, 2)), np.zeros(small_cfg.dims), b, sched, 0)


def test_posterior_step_final_is_mean(rng):
    s = make_schedule(10, 1e-3, 0.02)
    x0, xt = rng.random(5), rng.random(5)
    out = posterior_step(x0, xt, 1, s, rng.standard_normal(5))
    # at t = 1 the posterior mean collapses onto the clean prediction
    np.testing.assert_allclose(out, x0, atol=1e-12)
