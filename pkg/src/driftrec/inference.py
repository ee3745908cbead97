"""Deterministic inference: state rolling, future-environment prediction
strategies, top-K ranking, and do-interventions on the hidden features.

Inference is noise-free and pure: encoder and transition means are used
everywhere, gates are realized without noise, and ranking breaks ties by
ascending item index, so a fixed checkpoint and history always produce
bit-identical recommendations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import dataio
from . import model as m
from .autodiff import ParamStore

log = logging.getLogger(__name__)

STRATEGY_ALIASES = {
    "1": "latest-z", "latest-z": "latest-z",
    "2": "avg-predictions", "avg-predictions": "avg-predictions",
    "3": "avg-e", "avg-e": "avg-e",
}


def canonical_strategy(tag: str) -> str:
    try:
        return STRATEGY_ALIASES[str(tag)]
    except KeyError:
        raise ValueError(f"unknown inference strategy {tag!r}; "
                         "use latest-z | avg-predictions | avg-e (or 1|2|3)")


@dataclass
class RolledState:
    """Noise-free e/z means for a group of users sharing an environment count."""

    user_ids: np.ndarray
    n_envs: int
    e_means: list[np.ndarray]   # per env, (B, K)
    z_means: list[np.ndarray]   # per env, (B, H)


@dataclass
class Recommendation:
    user: int
    items: np.ndarray
    scores: np.ndarray


def _roll_group(histories: list[np.ndarray], params: ParamStore,
                dims: m.ModelDims, n_envs: int,
                user_ids: np.ndarray,
                e_override: dict[tuple[int, int], np.ndarray] | None = None,
                ) -> RolledState:
    """Roll one group of users batched; optional (row, env) -> e overrides."""
    graph = ad.Graph()
    binding = params.bind(graph)
    batch = len(histories)
    env_slices = [dataio.divide_environments(h, n_envs) for h in histories]
    e_means, z_means = [], []
    z_prev = graph.constant(np.zeros((batch, dims.pref_dim)))
    for t in range(n_envs):
        x_t = np.stack([dataio.to_multihot(s.slices[t], dims.n_items)
                        for s in env_slices])
        e_mu, _ = m.encode(binding, dims, graph.constant(x_t))
        e_val = e_mu.value.copy()
        if e_override:
            for (row, env), vec in e_override.items():
                if env == t:
                    e_val[row] = vec
        e_node = graph.constant(e_val)
        z_mu, _ = m.transition(binding, e_node, z_prev)
        e_means.append(e_val)
        z_means.append(z_mu.value.copy())
        z_prev = graph.constant(z_mu.value)
    return RolledState(user_ids, n_envs, e_means, z_means)


def roll_states(dataset: dataio.Dataset, user_ids: np.ndarray, params: ParamStore,
                dims: m.ModelDims, n_envs: int) -> list[RolledState]:
    """Re-divide each user's training history into `n_envs` environments and
    roll the deterministic state; users with shorter histories fall back to
    as many environments as they have interactions."""
    by_envs: dict[int, tuple[list[np.ndarray], list[int]]] = {}
    fallbacks = 0
    for u in user_ids:
        items = dataset.train_items(int(u))
        if len(items) == 0:
            continue
        eff = min(n_envs, len(items))
        if eff < n_envs:
            fallbacks += 1
        hs, ids = by_envs.setdefault(eff, ([], []))
        hs.append(items)
        ids.append(int(u))
    if fallbacks:
        log.warning("%d user(s) have fewer interactions than %d environments; "
                    "using shorter rolls", fallbacks, n_envs)
    groups = []
    for eff in sorted(by_envs):
        hs, ids = by_envs[eff]
        groups.append(_roll_group(hs, params, dims, eff, np.asarray(ids)))
    return groups


def _decode_scores(params: ParamStore, dims: m.ModelDims, z: np.ndarray,
                   softmax_out: bool = False) -> np.ndarray:
    graph = ad.Graph()
    binding = params.bind(graph)
    gates = m.draw_gates(binding, sigma_eps=1.0)  # noise-free: sigma unused
    logits = m.sparse_decode(binding, graph.constant(z), gates)
    if softmax_out:
        return ad.softmax(logits, axis=1).value
    return logits.value


def predict(rolled: RolledState, params: ParamStore, dims: m.ModelDims,
            strategy: str) -> np.ndarray:
    """Scores over items for every user row of a rolled group."""
    strategy = canonical_strategy(strategy)
    if strategy == "latest-z":
        return _decode_scores(params, dims, rolled.z_means[-1])
    if strategy == "avg-predictions":
        probs = None
        for z in rolled.z_means:
            p = _decode_scores(params, dims, z, softmax_out=True)
            probs = p if probs is None else probs + p
        return probs / rolled.n_envs
    # avg-e: transition once more from the mean feature vector
    e_avg = np.mean(np.stack(rolled.e_means), axis=0)
    graph = ad.Graph()
    binding = params.bind(graph)
    z_next, _ = m.transition(binding, graph.constant(e_avg),
                             graph.constant(rolled.z_means[-1]))
    return _decode_scores(params, dims, z_next.value)


def rank_topk(scores: np.ndarray, masked_items: np.ndarray, k: int,
              user: int = 0) -> Recommendation:
    """Top-k unmasked items by descending score, ties by ascending index."""
    n_items = scores.shape[0]
    keep = np.ones(n_items, dtype=bool)
    masked_items = np.asarray(masked_items, dtype=np.int64)
    if masked_items.size:
        keep[masked_items] = False
    candidates = np.flatnonzero(keep)
    if k > len(candidates):
        log.warning("requested top-%d but only %d unmasked items", k, len(candidates))
        k = len(candidates)
    cand_scores = scores[candidates]
    order = np.lexsort((candidates, -cand_scores))[:k]
    chosen = candidates[order]
    return Recommendation(user, chosen, scores[chosen])


def recommend(dataset: dataio.Dataset, params: ParamStore, dims: m.ModelDims,
              user_ids: np.ndarray, strategy: str, n_envs: int, k: int,
              mask_train: bool = True) -> list[Recommendation]:
    """End-to-end ranking for a set of users, ordered by user id."""
    recs: dict[int, Recommendation] = {}
    for group in roll_states(dataset, user_ids, params, dims, n_envs):
        scores = predict(group, params, dims, strategy)
        for row, u in enumerate(group.user_ids):
            mask = dataset.relevant_set(int(u), dataio.TRAIN) if mask_train \
                else np.empty(0, dtype=np.int64)
            recs[int(u)] = rank_topk(scores[row], mask, k, user=int(u))
    return [recs[int(u)] for u in user_ids if int(u) in recs]


def intervene(dataset: dataio.Dataset, params: ParamStore, dims: m.ModelDims,
              user: int, replacement_e: np.ndarray, n_envs: int, k: int,
              envs: str = "latest", strategy: str = "latest-z",
              mask_train: bool = True) -> Recommendation:
    """do-operation on the hidden features: override e_t with `replacement_e`
    at the latest (or every) environment, recompute downstream z, re-rank.

    `replacement_e` is either a (K,) vector applied at the chosen
    environments, or a (T, K) matrix giving one vector per environment
    when envs="all".
    """
    replacement_e = np.asarray(replacement_e, dtype=np.float64)
    items = dataset.train_items(user)
    eff = min(n_envs, max(1, len(items)))
    if envs not in ("latest", "all"):
        raise ValueError("envs must be 'latest' or 'all'")
    override: dict[tuple[int, int], np.ndarray] = {}
    if envs == "latest":
        if replacement_e.shape != (dims.feat_dim,):
            raise ValueError(f"replacement must have length {dims.feat_dim}")
        override[(0, eff - 1)] = replacement_e
    else:
        per_env = (np.tile(replacement_e, (eff, 1))
                   if replacement_e.ndim == 1 else replacement_e)
        if per_env.shape != (eff, dims.feat_dim):
            raise ValueError(f"replacement must be ({eff}, {dims.feat_dim})")
        for t in range(eff):
            override[(0, t)] = per_env[t]
    rolled = _roll_group([items], params, dims, eff, np.asarray([user]),
                         e_override=override)
    scores = predict(rolled, params, dims, strategy)[0]
    mask = dataset.relevant_set(user, dataio.TRAIN) if mask_train \
        else np.empty(0, dtype=np.int64)
    return rank_topk(scores, mask, k, user=user)


def rolled_features(dataset: dataio.Dataset, params: ParamStore,
                    dims: m.ModelDims, user: int, n_envs: int) -> RolledState:
    """Single-user rolled state (convenience for interventions/case studies)."""
    items = dataset.train_items(user)
    eff = min(n_envs, max(1, len(items)))
    return _roll_group([items], params, dims, eff, np.asarray([user]))
