"""Recommender networks over the autodiff graph.

The generative path per environment t is: encode the multi-hot
interaction vector x_t to a Gaussian over hidden user features e_t,
sample e_t, advance the preference state z_t from (e_t, z_{t-1}) through
a single transition layer, decode z_t through a gated sparse structure
into item logits, and score x_t under a multinomial likelihood.

All network functions operate on batches: rows are users. Parameters
live in a ParamStore and are bound to a graph per step; every function
takes the resulting binding dict.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor


@dataclass(frozen=True)
class ModelDims:
    """Architecture sizes: I items, K feature dims, H preference dims,
    C gate channels, encoder hidden widths."""

    n_items: int
    feat_dim: int
    pref_dim: int
    n_channels: int
    enc_hidden: tuple[int, ...] = (64,)

    def __post_init__(self):
        if min(self.n_items, self.feat_dim, self.pref_dim, self.n_channels) < 1:
            raise ValueError("all model dimensions must be >= 1")


DECODER_PARAMS = ("dec.alpha", "dec.beta", "dec.gamma_w", "dec.gamma_b")


def init_params(dims: ModelDims, seed: int) -> ParamStore:
    """Xavier-style weights, zero biases, gate parameters near mid-range."""
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence((seed, int(Purpose.INIT)))))
    store = ParamStore()

    def xavier(fan_in, fan_out):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        return rng.normal(0.0, std, size=(fan_in, fan_out))

    widths = [dims.n_items, *dims.enc_hidden, 2 * dims.feat_dim]
    for layer, (fin, fout) in enumerate(zip(widths[:-1], widths[1:])):
        store.add(f"enc.w{layer}", xavier(fin, fout))
        store.add(f"enc.b{layer}", np.zeros(fout))

    trans_in = dims.feat_dim + dims.pref_dim
    store.add("trans.w", xavier(trans_in, 2 * dims.pref_dim))
    store.add("trans.b", np.zeros(2 * dims.pref_dim))

    store.add("dec.gamma_w", xavier(dims.pref_dim, dims.n_items))
    store.add("dec.gamma_b", np.zeros(dims.n_items))
    store.add("dec.alpha", rng.uniform(0.4, 0.6, size=(dims.pref_dim, dims.n_channels)))
    store.add("dec.beta", rng.uniform(0.4, 0.6, size=(dims.n_items, dims.n_channels)))
    return store


def penalty_param_names(store: ParamStore, subset: str) -> list[str]:
    """Parameter names the gradient-variance penalty is computed over."""
    if subset == "decoder":
        return [n for n in store.names() if n in DECODER_PARAMS]
    if subset == "all":
        return store.names()
    raise ValueError(f"unknown penalty subset {subset!r} (use 'decoder' or 'all')")


def n_encoder_layers(dims: ModelDims) -> int:
    return len(dims.enc_hidden) + 1


def _half_selectors(graph: ad.Graph, width: int) -> tuple[Tensor, Tensor]:
    """Constant (2w x w) selectors extracting the two halves of a 2w output."""
    eye = np.eye(width)
    zero = np.zeros((width, width))
    first = np.concatenate([eye, zero], axis=0)
    second = np.concatenate([zero, eye], axis=0)
    return graph.constant(first), graph.constant(second)


def split_halves(out: Tensor) -> tuple[Tensor, Tensor]:
    width = out.shape[1] // 2
    s1, s2 = _half_selectors(out.graph, width)
    return ad.matmul(out, s1), ad.matmul(out, s2)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Row-wise x / ||x||; all-zero rows stay zero."""
    sq = ad.reduce_sum(ad.square(x), axis=1, keepdims=True)
    inv_norm = ad.exp(ad.scale(ad.log(sq), -0.5))
    return ad.multiply(x, inv_norm)


def encode(binding: dict[str, Tensor], dims: ModelDims, x: Tensor,
           dropout_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Gaussian parameters (mu, sigma) of the hidden features for each row of x."""
    h = l2_normalize_rows(x)
    if dropout_mask is not None:
        h = ad.dropout(h, dropout_mask)
    n_layers = len(dims.enc_hidden) + 1
    for layer in range(n_layers):
        h = ad.add(ad.matmul(h, binding[f"enc.w{layer}"]), binding[f"enc.b{layer}"])
        if layer < n_layers - 1:
            h = ad.tanh(h)
    mu, log_sigma = split_halves(h)
    return mu, ad.exp(log_sigma)


def transition(binding: dict[str, Tensor], e: Tensor, z_prev: Tensor) -> tuple[Tensor, Tensor]:
    """Gaussian parameters of z_t from (e_t, z_{t-1}) through one layer."""
    joint = ad.concat([e, z_prev], axis=1)
    out = ad.add(ad.matmul(joint, binding["trans.w"]), binding["trans.b"])
    mu, log_sigma = split_halves(out)
    return mu, ad.exp(log_sigma)


def reparam_sample(mu: Tensor, sigma: Tensor, noise: np.ndarray) -> Tensor:
    """mu + sigma * noise with caller-drawn standard-normal noise."""
    return ad.add(mu, ad.multiply(sigma, mu.graph.constant(noise)))


@dataclass
class GateMatrices:
    """Sampled gate values: raw clipped gates in [0,1] feed the sparsity
    surrogate; channel-softmaxed gates feed the decode."""

    raw_z: Tensor
    raw_x: Tensor
    norm_z: Tensor
    norm_x: Tensor


def draw_gates(binding: dict[str, Tensor], sigma_eps: float,
               noise_alpha: np.ndarray | None = None,
               noise_beta: np.ndarray | None = None) -> GateMatrices:
    """Clipped-Gaussian gates; pass noise=None (inference) for the noise-free gates.

    Noise arrays must already be scaled to std sigma_eps by the caller
    when drawn from a unit-normal stream.
    """
    alpha, beta = binding["dec.alpha"], binding["dec.beta"]
    g = alpha.graph

    def realize(param: Tensor, noise: np.ndarray | None) -> tuple[Tensor, Tensor]:
        pre = param if noise is None else ad.add(param, g.constant(noise))
        raw = ad.clip(pre, 0.0, 1.0)
        return raw, ad.softmax(raw, axis=1)

    raw_z, norm_z = realize(alpha, noise_alpha)
    raw_x, norm_x = realize(beta, noise_beta)
    return GateMatrices(raw_z, raw_x, norm_z, norm_x)


def sparse_decode(binding: dict[str, Tensor], z: Tensor, gates: GateMatrices) -> Tensor:
    """Item logits: sum over channels c of W_x[:,c] * f_gamma(W_z[:,c] * z)."""
    g = z.graph
    n_channels = gates.norm_z.shape[1]
    pref_dim = gates.norm_z.shape[0]
    n_items = gates.norm_x.shape[0]
    logits = None
    for c in range(n_channels):
        sel = np.zeros((n_channels, 1))
        sel[c, 0] = 1.0
        wz_row = ad.reshape(ad.matmul(gates.norm_z, g.constant(sel)), (1, pref_dim))
        wx_row = ad.reshape(ad.matmul(gates.norm_x, g.constant(sel)), (1, n_items))
        routed = ad.multiply(z, wz_row)
        h = ad.add(ad.matmul(routed, binding["dec.gamma_w"]), binding["dec.gamma_b"])
        contrib = ad.multiply(h, wx_row)
        logits = contrib if logits is None else ad.add(logits, contrib)
    return logits


def log_multinomial(x: Tensor, logits: Tensor) -> Tensor:
    """Per-row multinomial log-likelihood (up to the constant term).

    Returns a (B, 1) column of sum_i x_i * log softmax(logits)_i.
    """
    log_probs = ad.log_softmax(logits, axis=1)
    return ad.reduce_sum(ad.multiply(x, log_probs), axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# deterministic noise streams

class Purpose(IntEnum):
    INIT = 0
    E_NOISE = 1
    Z_NOISE = 2
    GATE_ALPHA = 3
    GATE_BETA = 4
    DROPOUT = 5
    SHUFFLE = 6


class NoiseStreams:
    """Counter-based standard-normal streams keyed by
    (seed, epoch, environment, purpose[, sample]); a user's noise row is
    independent of batch composition and scheduling."""

    def __init__(self, seed: int, n_users: int) -> None:
        self.seed = int(seed)
        self.n_users = int(n_users)

    def _gen(self, *key: int) -> np.random.Generator:
        entropy = (self.seed,) + tuple(int(k) for k in key)
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def user_rows(self, epoch: int, env: int, purpose: Purpose,
                  user_ids: np.ndarray, dim: int, sample: int = 0) -> np.ndarray:
        """Standard-normal rows for the given users."""
        full = self._gen(epoch, env, int(purpose), sample).standard_normal(
            (self.n_users, dim))
        return full[np.asarray(user_ids, dtype=np.intp)]

    def matrix(self, epoch: int, step: int, purpose: Purpose,
               shape: tuple[int, ...]) -> np.ndarray:
        """Standard-normal matrix shared across the batch (gate noise)."""
        return self._gen(epoch, step, int(purpose)).standard_normal(shape)

    def dropout_masks(self, epoch: int, env: int, user_ids: np.ndarray,
                      dim: int, drop_prob: float) -> np.ndarray | None:
        """Inverted-dropout masks with entries in {0, 1/(1-p)}; None if p == 0."""
        if drop_prob <= 0.0:
            return None
        full = self._gen(epoch, env, int(Purpose.DROPOUT)).random((self.n_users, dim))
        keep = (full >= drop_prob).astype(np.float64) / (1.0 - drop_prob)
        return keep[np.asarray(user_ids, dtype=np.intp)]

    def permutation(self, epoch: int) -> np.ndarray:
        return self._gen(epoch, 0, int(Purpose.SHUFFLE)).permutation(self.n_users)
