import numpy as np
import pytest
from scipy import stats

import driftrec.autodiff as ad
import driftrec.model as m
import driftrec.objective as obj

from helpers import fd_param_gradient, max_rel_err


TINY = m.ModelDims(n_items=6, feat_dim=3, pref_dim=4, n_channels=2, enc_hidden=(5,))


def tiny_batch(seed=0, batch=3, n_envs=2):
    rng = np.random.default_rng(seed)
    return [(rng.uniform(size=(batch, TINY.n_items)) < 0.5).astype(float)
            for _ in range(n_envs)]


def small_noise(seed, batch, n_envs, mc=1):
    rng = np.random.default_rng(seed)
    return obj.BatchNoise(
        e_noise=[rng.standard_normal((batch, TINY.feat_dim)) for _ in range(n_envs)],
        z_noise=[[rng.standard_normal((batch, TINY.pref_dim)) for _ in range(mc)]
                 for _ in range(n_envs)],
        gate_alpha=0.05 * rng.standard_normal((TINY.pref_dim, TINY.n_channels)),
        gate_beta=0.05 * rng.standard_normal((TINY.n_items, TINY.n_channels)),
        dropout=[None] * n_envs,
    )


# ---------------------------------------------------------------------------
# KL divergence

def kl_value(mean, sigma):
    g = ad.Graph()
    col = obj.kl_std_gaussian(g.variable(np.atleast_2d(mean)),
                              g.variable(np.atleast_2d(sigma)))
    return float(col.value.sum())


def test_kl_standard_is_zero():
    assert kl_value(np.zeros(4), np.ones(4)) == pytest.approx(0.0, abs=1e-12)


def test_kl_unit_mean():
    assert kl_value(np.array([1.0]), np.array([1.0])) == pytest.approx(0.5, abs=1e-12)


def test_kl_nonnegative_random():
    rng = np.random.default_rng(1)
    for _ in range(50):
        mean = rng.normal(size=5)
        sigma = np.exp(rng.normal(size=5) * 0.5)
        assert kl_value(mean, sigma) >= -1e-12


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(2)
    mean = np.array([0.5, -1.0, 0.2])
    sigma = np.array([0.8, 1.3, 0.5])
    closed = kl_value(mean, sigma)
    draws = mean + sigma * rng.standard_normal((10 ** 5, 3))
    log_q = -0.5 * (((draws - mean) / sigma) ** 2) - np.log(sigma) - 0.5 * np.log(2 * np.pi)
    log_p = -0.5 * draws ** 2 - 0.5 * np.log(2 * np.pi)
    mc = float(np.mean(np.sum(log_q - log_p, axis=1)))
    assert abs(mc - closed) / closed < 0.01


# ---------------------------------------------------------------------------
# expected-L0 surrogate

def l0_value(alpha, beta, sigma_eps):
    g = ad.Graph()
    return float(obj.l0_surrogate(g.variable(alpha), g.variable(beta),
                                  sigma_eps).value)


def test_l0_symmetry_and_saturation():
    zero = l0_value(np.zeros((1, 1)), np.zeros((0, 1)).reshape(0, 1), 0.5)
    assert zero == pytest.approx(0.5, abs=1e-12)
    sat = l0_value(np.array([[10 * 0.5]]), np.zeros((0, 1)), 0.5)
    assert sat == pytest.approx(1.0, abs=1e-7)
    phi1 = l0_value(np.array([[0.5]]), np.zeros((0, 1)), 0.5)
    assert phi1 == pytest.approx(stats.norm.cdf(1.0), abs=1e-12)


def test_l0_matches_monte_carlo_gate_count():
    rng = np.random.default_rng(3)
    alpha = rng.uniform(-0.4, 1.0, size=(4, 2))
    beta = rng.uniform(-0.4, 1.0, size=(9, 2))
    sigma_eps = 0.5
    expected = l0_value(alpha, beta, sigma_eps)
    n = 10 ** 5
    count = 0.0
    for params in (alpha, beta):
        eps = rng.normal(0.0, sigma_eps, size=(n,) + params.shape)
        raw = np.clip(params[None] + eps, 0.0, 1.0)
        count += np.mean(np.sum(raw > 0, axis=(1, 2)))
    assert abs(count - expected) / expected < 0.01


# ---------------------------------------------------------------------------
# variance penalty

def penalty_value(grad_arrays):
    g = ad.Graph()
    env_grads = [[g.variable(arr) for arr in env] for env in grad_arrays]
    return float(obj.variance_penalty(env_grads).value)


def test_penalty_zero_for_identical_gradients():
    arr = np.array([0.3, -0.7, 1.1])
    assert penalty_value([[arr], [arr], [arr]]) == pytest.approx(0.0, abs=1e-12)


def test_penalty_hand_example():
    assert penalty_value([[np.array([1.0, 0.0])],
                          [np.array([0.0, 1.0])]]) == pytest.approx(1.0, abs=1e-12)


def test_penalty_single_environment_is_zero():
    assert penalty_value([[np.array([2.0, 3.0])]]) == 0.0


def test_penalty_permutation_invariant_and_quadratic():
    rng = np.random.default_rng(4)
    envs = [[rng.normal(size=(3, 2)), rng.normal(size=4)] for _ in range(3)]
    base = penalty_value(envs)
    perm = [envs[2], envs[0], envs[1]]
    assert penalty_value(perm) == pytest.approx(base, rel=1e-12)
    scaled = [[2.5 * a for a in env] for env in envs]
    assert penalty_value(scaled) == pytest.approx(2.5 ** 2 * base, rel=1e-10)


# ---------------------------------------------------------------------------
# annealing

def test_anneal_schedule():
    sched = obj.AnnealSchedule(target=0.6, warmup_steps=100)
    assert obj.effective_lambda1(sched, 0) == 0.0
    assert obj.effective_lambda1(sched, 100) == pytest.approx(0.6)
    assert obj.effective_lambda1(sched, 50) == pytest.approx(0.3)
    assert obj.effective_lambda1(sched, 1000) == pytest.approx(0.6)
    with pytest.raises(ValueError):
        obj.effective_lambda1(sched, -1)


def test_anneal_monotone():
    sched = obj.AnnealSchedule(0.7, 37)
    values = [obj.effective_lambda1(sched, s) for s in range(120)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert max(values) <= 0.7 + 1e-12


# ---------------------------------------------------------------------------
# loss assembly

def assemble(store, x_envs, noise, lam1, lam2, lam3, subset=("dec.alpha",
             "dec.beta", "dec.gamma_w", "dec.gamma_b")):
    g = ad.Graph()
    binding = store.bind(g)
    total, br = obj.assemble_loss(binding, TINY, x_envs, noise, lam1, lam2,
                                  lam3, 0.5, list(subset))
    return g, binding, total, br


def test_breakdown_invariant():
    store = m.init_params(TINY, seed=5)
    x_envs = tiny_batch(5)
    noise = small_noise(5, 3, 2)
    _, _, total, br = assemble(store, x_envs, noise, 0.4, 0.3, 0.01)
    recomputed = sum(r + 0.4 * k for r, k in zip(br.recon, br.kl)) \
        + 0.3 * br.l0 + 0.01 * br.penalty
    assert abs(br.total - recomputed) < 1e-10
    assert br.total == float(total.value)


def test_loss_nonnegative_and_finite():
    store = m.init_params(TINY, seed=6)
    x_envs = tiny_batch(6)
    noise = small_noise(6, 3, 2)
    _, _, total, br = assemble(store, x_envs, noise, 1.0, 0.5, 1e-3)
    assert np.isfinite(br.total)
    assert br.total >= 0.0
    assert all(k >= -1e-12 for k in br.kl)


def test_zero_weight_network_has_zero_kl():
    store = m.init_params(TINY, seed=0)
    store.unflatten(np.zeros(store.size))
    x_envs = tiny_batch(7)
    noise = obj.BatchNoise.zeros(TINY, 3, 2)
    _, _, _, br = assemble(store, x_envs, noise, 1.0, 0.0, 0.0)
    assert all(k == pytest.approx(0.0, abs=1e-12) for k in br.kl)


def test_reconstruction_optimum_uniform_over_hits():
    # with perfect logits the per-user optimum puts mass 1/N on each hit
    g = ad.Graph()
    x_val = np.array([[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]])
    logits = np.where(x_val > 0, 40.0, 0.0)
    ll = m.log_multinomial(g.constant(x_val), g.constant(logits))
    n = 3
    assert ll.value[0, 0] == pytest.approx(n * np.log(1.0 / n), rel=1e-9)


def test_empty_environment_contributes_zero_reconstruction():
    store = m.init_params(TINY, seed=8)
    store["enc.b1"] = np.full(6, 0.3)  # nonzero encoder head so KL(q||prior) > 0
    x_envs = [np.zeros((2, 6)), tiny_batch(8, batch=2)[0]]
    noise = small_noise(8, 2, 2)
    _, _, _, br = assemble(store, x_envs, noise, 0.5, 0.0, 0.0)
    assert br.recon[0] == pytest.approx(0.0, abs=1e-12)
    assert br.kl[0] > 0.0  # the KL term is still evaluated normally


def test_total_loss_gradient_matches_fd_without_penalty():
    store = m.init_params(TINY, seed=9)
    x_envs = tiny_batch(9)
    noise = small_noise(9, 3, 2)

    def loss(s):
        _, _, total, _ = assemble(s, x_envs, noise, 0.4, 0.3, 0.0)
        return float(total.value)

    _, binding, total, _ = assemble(store, x_envs, noise, 0.4, 0.3, 0.0)
    analytic = ad.gradient_vector(total, binding, store)
    numeric = fd_param_gradient(loss, store, 1e-5)
    assert max_rel_err(analytic, numeric) < 1e-4


def test_total_loss_gradient_matches_fd_with_penalty():
    store = m.init_params(TINY, seed=10)
    x_envs = tiny_batch(10)
    noise = small_noise(10, 3, 2)

    def loss(s):
        _, _, total, _ = assemble(s, x_envs, noise, 0.4, 0.2, 0.05)
        return float(total.value)

    _, binding, total, br = assemble(store, x_envs, noise, 0.4, 0.2, 0.05)
    assert br.penalty > 0.0
    analytic = ad.gradient_vector(total, binding, store)
    numeric = fd_param_gradient(loss, store, 1e-5)
    assert max_rel_err(analytic, numeric) < 1e-3


def test_penalty_over_all_params_also_differentiates():
    store = m.init_params(TINY, seed=11)
    x_envs = tiny_batch(11)
    noise = small_noise(11, 3, 2)
    g = ad.Graph()
    binding = store.bind(g)
    total, br = obj.assemble_loss(binding, TINY, x_envs, noise, 0.4, 0.2, 0.05,
                                  0.5, store.names())
    vec = ad.gradient_vector(total, binding, store)
    assert np.all(np.isfinite(vec)) and br.penalty > 0.0


def test_mc_sample_count_changes_only_reconstruction_noise():
    store = m.init_params(TINY, seed=12)
    x_envs = tiny_batch(12)
    noise1 = small_noise(12, 3, 2, mc=1)
    noise4 = small_noise(12, 3, 2, mc=4)
    _, _, _, br1 = assemble(store, x_envs, noise1, 0.4, 0.0, 0.0)
    _, _, _, br4 = assemble(store, x_envs, noise4, 0.4, 0.0, 0.0)
    assert br1.kl == br4.kl
    assert br1.recon != br4.recon
