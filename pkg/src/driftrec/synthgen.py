"""Synthetic interaction generator sampled from the modeled causal graph.

Hidden per-environment user features drive a latent preference state
through a tanh recurrence (features -> preference, previous preference
-> preference), and the preference state drives item draws through a
block-sparse emission: items and latent dimensions are partitioned into
categories, and category-c items depend only on category-c latent
dimensions. A configurable fraction of "shifted" users resamples part of
the feature vector at every environment boundary, injecting a
controllable preference shift. The last environment is tagged as the
test split and the second-to-last as validation, so held-out evaluation
is genuinely out-of-distribution for shifted users.

The functional forms are a concretization chosen for desk-scale
verification; they are not fitted to any real dataset.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from . import dataio

log = logging.getLogger(__name__)

_WEIGHT_SALT = 101
_ASSIGN_SALT = 202
_USER_SALT = 303


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 200
    n_items: int = 100
    n_categories: int = 2        # true category count
    latent_dim: int = 8          # true preference width, divisible by categories
    n_envs: int = 4              # includes one validation + one test environment
    n_per_env: int = 20
    shift_strength: float = 0.5  # fraction of feature coords resampled per boundary
    shifted_fraction: float = 0.5
    seed: int = 0
    logit_scale: float = 2.0
    state_noise: float = 0.1

    def __post_init__(self):
        if self.n_items % self.n_categories != 0:
            raise ValueError("n_items must be divisible by n_categories")
        if self.latent_dim % self.n_categories != 0:
            raise ValueError("latent_dim must be divisible by n_categories")
        if not (0.0 <= self.shift_strength <= 1.0):
            raise ValueError("shift_strength must be in [0, 1]")
        if not (0.0 <= self.shifted_fraction <= 1.0):
            raise ValueError("shifted_fraction must be in [0, 1]")
        if self.n_per_env > self.n_items:
            raise ValueError("n_per_env cannot exceed the item count "
                             "(draws are without replacement)")
        if self.n_envs < 3:
            raise ValueError("need >= 3 environments (train + validation + test)")


@dataclass
class GroundTruth:
    """Generator internals: category assignments, weights, realizations."""

    item_category: np.ndarray      # (I,)
    latent_category: np.ndarray    # (H*,)
    feat_to_pref: np.ndarray       # (H*, H*) block-diagonal
    pref_recurrence: np.ndarray    # (H*, H*) block-diagonal
    emission: np.ndarray           # (H*, I), block-sparse
    features: np.ndarray           # (U, T, H*)
    preferences: np.ndarray        # (U, T, H*)
    shifted: np.ndarray            # (U,) bool


def _gen(*entropy: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def _block_diag(rng: np.random.Generator, dim: int, n_blocks: int,
                scale: float) -> np.ndarray:
    d = dim // n_blocks
    out = np.zeros((dim, dim))
    for b in range(n_blocks):
        lo, hi = b * d, (b + 1) * d
        out[lo:hi, lo:hi] = rng.normal(0.0, scale / np.sqrt(d), size=(d, d))
    return out


def generate(cfg: SynthConfig) -> tuple[dataio.Dataset, GroundTruth]:
    """Sample a dataset plus its ground truth; bit-identical for a fixed seed."""
    U, I, C, H, T = (cfg.n_users, cfg.n_items, cfg.n_categories,
                     cfg.latent_dim, cfg.n_envs)
    items_per_cat = I // C
    dims_per_cat = H // C
    item_category = np.repeat(np.arange(C), items_per_cat)
    latent_category = np.repeat(np.arange(C), dims_per_cat)

    wrng = _gen(cfg.seed, _WEIGHT_SALT)
    feat_to_pref = _block_diag(wrng, H, C, scale=1.0)
    pref_recurrence = _block_diag(wrng, H, C, scale=0.4)
    emission = np.zeros((H, I))
    for i in range(I):
        c = item_category[i]
        rows = slice(c * dims_per_cat, (c + 1) * dims_per_cat)
        emission[rows, i] = wrng.normal(0.0, 1.0, size=dims_per_cat)

    n_shifted = int(round(cfg.shifted_fraction * U))
    shifted = np.zeros(U, dtype=bool)
    shifted[_gen(cfg.seed, _ASSIGN_SALT).permutation(U)[:n_shifted]] = True

    n_resample = int(round(cfg.shift_strength * H))
    features = np.zeros((U, T, H))
    preferences = np.zeros((U, T, H))

    users, items, ratings, stamps, splits = [], [], [], [], []
    offsets = [0]
    for u in range(U):
        rng = _gen(cfg.seed, _USER_SALT, u)
        e = rng.standard_normal(H)
        z = np.zeros(H)
        for _ in range(8):  # burn-in to the pre-history fixed point
            z = np.tanh(feat_to_pref @ e + pref_recurrence @ z)
        for t in range(T):
            if t > 0 and shifted[u] and n_resample > 0:
                coords = rng.choice(H, size=n_resample, replace=False)
                e = e.copy()
                e[coords] = rng.standard_normal(n_resample)
            z = np.tanh(feat_to_pref @ e + pref_recurrence @ z) \
                + cfg.state_noise * rng.standard_normal(H)
            features[u, t] = e
            preferences[u, t] = z

            logits = cfg.logit_scale * (z @ emission)
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            drawn = rng.choice(I, size=cfg.n_per_env, replace=False, p=probs)
            split = dataio.TRAIN if t < T - 2 else (
                dataio.VALIDATION if t == T - 2 else dataio.TEST)
            for j, item in enumerate(drawn):
                users.append(u)
                items.append(int(item))
                ratings.append(5.0)
                stamps.append(t * 10_000 + j)
                splits.append(split)
        offsets.append(len(users))

    width_u = len(str(U - 1))
    width_i = len(str(I - 1))
    dataset = dataio.Dataset(
        user_keys=[f"u{u:0{width_u}d}" for u in range(U)],
        item_keys=[f"i{i:0{width_i}d}" for i in range(I)],
        user_of=np.asarray(users, dtype=np.int32),
        item_of=np.asarray(items, dtype=np.int32),
        rating_of=np.asarray(ratings, dtype=np.float64),
        timestamp_of=np.asarray(stamps, dtype=np.int64),
        split_of=np.asarray(splits, dtype=np.uint8),
        offsets=np.asarray(offsets, dtype=np.int64),
    )
    truth = GroundTruth(item_category, latent_category, feat_to_pref,
                        pref_recurrence, emission, features, preferences, shifted)
    return dataset, truth


def structure_recovery(learned_beta: np.ndarray, item_category: np.ndarray,
                       n_true_categories: int) -> float:
    """Fraction of items whose argmax gate channel matches the true category,
    maximized over channel-to-category matchings."""
    learned_beta = np.asarray(learned_beta)
    n_items, n_channels = learned_beta.shape
    raw = np.clip(learned_beta, 0.0, 1.0)
    assign = np.argmax(raw, axis=1)

    if n_channels != n_true_categories:
        log.warning("learned channel count %d != true categories %d; "
                    "scoring under the best injective map",
                    n_channels, n_true_categories)
    k = min(n_channels, n_true_categories)
    best = 0.0
    if n_channels <= n_true_categories:
        # map each learned channel to a distinct true category
        for perm in itertools.permutations(range(n_true_categories), k):
            mapping = np.asarray(perm)
            best = max(best, float(np.mean(mapping[assign] == item_category)))
    else:
        # map each true category to a distinct learned channel
        for perm in itertools.permutations(range(n_channels), k):
            inv = np.asarray(perm)
            best = max(best, float(np.mean(assign == inv[item_category])))
    return best


def save_ground_truth(path, truth: GroundTruth, dataset: dataio.Dataset) -> None:
    """Text sidecar: item -> category and user -> shifted-label tables."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# item\tcategory\n")
        for i, key in enumerate(dataset.item_keys):
            fh.write(f"{key}\t{int(truth.item_category[i])}\n")
        fh.write("# user\tshifted\n")
        for u, key in enumerate(dataset.user_keys):
            fh.write(f"{key}\t{int(truth.shifted[u])}\n")


def load_ground_truth_tables(path) -> tuple[dict[str, int], dict[str, int]]:
    item_cat: dict[str, int] = {}
    user_shift: dict[str, int] = {}
    section = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                section = "item" if "item" in line else "user"
                continue
            if not line:
                continue
            key, val = line.split("\t")
            if section == "item":
                item_cat[key] = int(val)
            else:
                user_shift[key] = int(val)
    return item_cat, user_shift
