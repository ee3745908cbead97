"""Multi-objective training loss.

Per environment: negative multinomial log-likelihood plus a KL term
against the standard-normal prior on the hidden features, with the KL
weight ramped up by a linear annealing schedule. Two regularizers are
added on top: an expected-L0 surrogate over the stochastic gates and a
penalty on the variance of per-environment gradients, whose own gradient
is obtained by differentiating through the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as m
from .autodiff import Tensor


@dataclass(frozen=True)
class AnnealSchedule:
    """Linear 0 -> target ramp of the KL weight over `warmup_steps`."""

    target: float
    warmup_steps: int


def effective_lambda1(schedule: AnnealSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule.warmup_steps <= 0:
        return schedule.target
    return schedule.target * min(1.0, step / schedule.warmup_steps)


def kl_std_gaussian(mean: Tensor, sigma: Tensor) -> Tensor:
    """Closed-form KL(N(mean, diag sigma^2) || N(0, I)) per row, as a (B,1) column."""
    g = mean.graph
    one = g.constant(1.0)
    terms = ad.subtract(ad.add(ad.square(mean), ad.square(sigma)),
                        ad.add(one, ad.scale(ad.log(sigma), 2.0)))
    return ad.scale(ad.reduce_sum(terms, axis=1, keepdims=True), 0.5)


def l0_surrogate(alpha: Tensor, beta: Tensor, sigma_eps: float) -> Tensor:
    """Expected number of non-zero gates under clipped-Gaussian sampling.

    P(param + eps > 0) = Phi(param / sigma_eps), summed over both gate
    matrices; differentiable through the normal CDF.
    """
    if sigma_eps <= 0:
        raise ValueError("sigma_eps must be > 0")
    inv = 1.0 / sigma_eps
    return ad.add(ad.reduce_sum(ad.normal_cdf(ad.scale(alpha, inv))),
                  ad.reduce_sum(ad.normal_cdf(ad.scale(beta, inv))))


def variance_penalty(env_grads: list[list[Tensor]]) -> Tensor:
    """sum_t ||g_t - mean_t g_t||^2 over per-environment gradient tensors.

    `env_grads[t]` lists one gradient tensor per penalized parameter.
    The result is a graph tensor, so a further backward pass yields the
    penalty's own gradient (double backward).
    """
    n_envs = len(env_grads)
    if n_envs == 0:
        raise ValueError("need at least one environment")
    graph = env_grads[0][0].graph
    if n_envs == 1:
        return graph.constant(0.0)
    penalty = None
    n_params = len(env_grads[0])
    for p in range(n_params):
        mean = env_grads[0][p]
        for t in range(1, n_envs):
            mean = ad.add(mean, env_grads[t][p])
        mean = ad.scale(mean, 1.0 / n_envs)
        for t in range(n_envs):
            dev = ad.reduce_sum(ad.square(ad.subtract(env_grads[t][p], mean)))
            penalty = dev if penalty is None else ad.add(penalty, dev)
    return penalty


@dataclass
class LossBreakdown:
    """Scalar loss pieces of one batch: total = sum_t (recon_t + lambda1*kl_t)
    + lambda2*l0 + lambda3*penalty."""

    recon: list[float]
    kl: list[float]
    l0: float
    penalty: float
    total: float
    lambda1: float

    def elbo_total(self) -> float:
        return float(sum(r + self.lambda1 * k for r, k in zip(self.recon, self.kl)))


@dataclass
class BatchNoise:
    """Caller-drawn randomness for one optimization step."""

    e_noise: list[np.ndarray]                 # per env, (B, K)
    z_noise: list[list[np.ndarray]]           # per env, per MC sample, (B, H)
    gate_alpha: np.ndarray | None             # (H, C) already scaled by sigma_eps
    gate_beta: np.ndarray | None              # (I, C)
    dropout: list[np.ndarray | None]          # per env, (B, I) or None

    @staticmethod
    def zeros(dims: m.ModelDims, batch: int, n_envs: int,
              mc_samples: int = 1) -> "BatchNoise":
        return BatchNoise(
            e_noise=[np.zeros((batch, dims.feat_dim)) for _ in range(n_envs)],
            z_noise=[[np.zeros((batch, dims.pref_dim)) for _ in range(mc_samples)]
                     for _ in range(n_envs)],
            gate_alpha=None,
            gate_beta=None,
            dropout=[None] * n_envs,
        )


def environment_losses(binding: dict[str, Tensor], dims: m.ModelDims,
                       x_envs: list[np.ndarray], noise: BatchNoise,
                       lambda1: float, sigma_eps: float,
                       normalize_by_count: bool = False,
                       ) -> tuple[list[Tensor], list[Tensor], list[Tensor], m.GateMatrices]:
    """Per-environment batch-mean reconstruction and KL terms.

    Returns (recon_t, kl_t, env_loss_t, gates) where env_loss_t =
    recon_t + lambda1 * kl_t. The preference state is carried between
    environments through the first MC sample.
    """
    graph = binding["dec.alpha"].graph
    n_envs = len(x_envs)
    batch = x_envs[0].shape[0]
    gates = m.draw_gates(binding, sigma_eps, noise.gate_alpha, noise.gate_beta)

    recon_terms: list[Tensor] = []
    kl_terms: list[Tensor] = []
    env_losses: list[Tensor] = []
    z_prev = graph.constant(np.zeros((batch, dims.pref_dim)))
    for t in range(n_envs):
        x_t = graph.constant(x_envs[t])
        e_mu, e_sigma = m.encode(binding, dims, x_t, noise.dropout[t])
        e_sample = m.reparam_sample(e_mu, e_sigma, noise.e_noise[t])
        z_mu, z_sigma = m.transition(binding, e_sample, z_prev)

        ll_col = None
        carried = None
        for s, zn in enumerate(noise.z_noise[t]):
            z_sample = m.reparam_sample(z_mu, z_sigma, zn)
            if s == 0:
                carried = z_sample
            logits = m.sparse_decode(binding, z_sample, gates)
            col = m.log_multinomial(x_t, logits)
            ll_col = col if ll_col is None else ad.add(ll_col, col)
        ll_col = ad.scale(ll_col, 1.0 / len(noise.z_noise[t]))
        if normalize_by_count:
            counts = np.maximum(x_envs[t].sum(axis=1, keepdims=True), 1.0)
            ll_col = ad.multiply(ll_col, graph.constant(1.0 / counts))

        recon_t = ad.scale(ad.reduce_sum(ll_col), -1.0 / batch)
        kl_t = ad.scale(ad.reduce_sum(kl_std_gaussian(e_mu, e_sigma)), 1.0 / batch)
        recon_terms.append(recon_t)
        kl_terms.append(kl_t)
        env_losses.append(ad.add(recon_t, ad.scale(kl_t, lambda1)))
        z_prev = carried
    return recon_terms, kl_terms, env_losses, gates


def assemble_loss(binding: dict[str, Tensor], dims: m.ModelDims,
                  x_envs: list[np.ndarray], noise: BatchNoise,
                  lambda1: float, lambda2: float, lambda3: float,
                  sigma_eps: float, penalty_params: list[str],
                  normalize_by_count: bool = False,
                  ) -> tuple[Tensor, LossBreakdown]:
    """Full Eq.-style training objective for one batch.

    The variance penalty differentiates the per-environment losses
    w.r.t. `penalty_params` on the same graph, so the returned total can
    be backpropagated once more for the parameter update.
    """
    recon_terms, kl_terms, env_losses, gates = environment_losses(
        binding, dims, x_envs, noise, lambda1, sigma_eps, normalize_by_count)

    total = env_losses[0]
    for t in range(1, len(env_losses)):
        total = ad.add(total, env_losses[t])

    l0 = l0_surrogate(binding["dec.alpha"], binding["dec.beta"], sigma_eps)
    if lambda2 != 0.0:
        total = ad.add(total, ad.scale(l0, lambda2))

    penalty_value = 0.0
    if lambda3 != 0.0 and len(env_losses) > 1:
        wrt = [binding[name] for name in penalty_params]
        env_grads = [ad.backward(loss_t, wrt) for loss_t in env_losses]
        penalty = variance_penalty(env_grads)
        total = ad.add(total, ad.scale(penalty, lambda3))
        penalty_value = float(penalty.value)

    breakdown = LossBreakdown(
        recon=[float(t.value) for t in recon_terms],
        kl=[float(t.value) for t in kl_terms],
        l0=float(l0.value),
        penalty=penalty_value,
        total=float(total.value),
        lambda1=lambda1,
    )
    return total, breakdown
