"""All-ranking evaluation, shift-group analysis and case-study statistics.

Recall@K divides hits by the full relevant count (the all-ranking
convention); a flag switches to the min(K, |relevant|) denominator.
Users with empty relevant sets are excluded from averages. Evaluation
is chunked over a fixed chunk size so results are bit-identical for any
worker count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _stats

from . import dataio
from . import inference
from . import model as m
from .autodiff import ParamStore

log = logging.getLogger(__name__)

EVAL_CHUNK = 256  # fixed so worker count cannot change arithmetic


def recall_at_k(recommended: np.ndarray, relevant, k: int,
                denom: str = "relevant") -> float:
    """|top-k hits| / |relevant| (or / min(k, |relevant|) with denom="capped")."""
    rel = set(int(i) for i in relevant)
    if not rel:
        raise ValueError("relevant set must be non-empty")
    hits = sum(1 for i in recommended[:k] if int(i) in rel)
    d = len(rel) if denom == "relevant" else min(k, len(rel))
    return hits / d


def ndcg_at_k(recommended: np.ndarray, relevant, k: int) -> float:
    """Binary-relevance NDCG: DCG over hit ranks / ideal DCG."""
    rel = set(int(i) for i in relevant)
    if not rel:
        raise ValueError("relevant set must be non-empty")
    dcg = 0.0
    for rank, item in enumerate(recommended[:k]):
        if int(item) in rel:
            dcg += 1.0 / np.log2(rank + 2)
    idcg = 0.0
    for rank in range(min(k, len(rel))):
        idcg += 1.0 / np.log2(rank + 2)
    return dcg / idcg


@dataclass
class MetricReport:
    """Mean and per-user Recall@K / NDCG@K over one split."""

    cutoffs: tuple[int, ...]
    recall: dict[int, float]
    ndcg: dict[int, float]
    per_user_recall: dict[int, np.ndarray]
    per_user_ndcg: dict[int, np.ndarray]
    user_ids: np.ndarray
    strategy: str
    n_envs: int

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    def to_text(self) -> str:
        lines = [f"strategy = {self.strategy}", f"T_i = {self.n_envs}",
                 f"users = {self.n_users}"]
        for k in self.cutoffs:
            lines.append(f"recall@{k} = {self.recall[k]:.6f}")
            lines.append(f"ndcg@{k} = {self.ndcg[k]:.6f}")
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        header = "user\t" + "\t".join(
            [f"recall@{k}" for k in self.cutoffs] + [f"ndcg@{k}" for k in self.cutoffs])
        rows = [header]
        for i, u in enumerate(self.user_ids):
            vals = [f"{self.per_user_recall[k][i]:.6f}" for k in self.cutoffs]
            vals += [f"{self.per_user_ndcg[k][i]:.6f}" for k in self.cutoffs]
            rows.append(f"{u}\t" + "\t".join(vals))
        return "\n".join(rows) + "\n"


def _metrics_from_scores(score_rows: np.ndarray, users: np.ndarray,
                         dataset: dataio.Dataset, split: int,
                         cutoffs: tuple[int, ...], denom: str,
                         ) -> dict[int, list[tuple[float, float]]]:
    out: dict[int, list[tuple[float, float]]] = {k: [] for k in cutoffs}
    kmax = max(cutoffs)
    for row, u in enumerate(users):
        relevant = dataset.relevant_set(int(u), split)
        mask = dataset.relevant_set(int(u), dataio.TRAIN)
        rec = inference.rank_topk(score_rows[row], mask, kmax, user=int(u))
        for k in cutoffs:
            out[k].append((recall_at_k(rec.items, relevant, k, denom),
                           ndcg_at_k(rec.items, relevant, k)))
    return out


def _eligible_users(dataset: dataio.Dataset, split: int) -> np.ndarray:
    users = [u for u in range(dataset.n_users)
             if dataset.relevant_set(u, split).size > 0
             and dataset.train_items(u).size > 0]
    return np.asarray(users, dtype=np.int64)


def evaluate_params(params: ParamStore, dims: m.ModelDims, dataset: dataio.Dataset,
                    split: int, strategy: str, n_envs: int,
                    cutoffs: tuple[int, ...] = (10, 20), workers: int = 1,
                    denom: str = "relevant") -> MetricReport:
    """Rank every non-training item per user and average Recall/NDCG."""
    strategy = inference.canonical_strategy(strategy)
    users = _eligible_users(dataset, split)
    chunks = [users[i:i + EVAL_CHUNK] for i in range(0, len(users), EVAL_CHUNK)]

    def run_chunk(chunk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rows = np.empty((len(chunk), dims.n_items))
        order = np.empty(len(chunk), dtype=np.int64)
        pos = {int(u): i for i, u in enumerate(chunk)}
        for group in inference.roll_states(dataset, chunk, params, dims, n_envs):
            scores = inference.predict(group, params, dims, strategy)
            for r, u in enumerate(group.user_ids):
                rows[pos[int(u)]] = scores[r]
                order[pos[int(u)]] = int(u)
        return order, rows

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_chunk, chunks))
    else:
        results = [run_chunk(c) for c in chunks]

    per: dict[int, list[tuple[float, float]]] = {k: [] for k in cutoffs}
    all_users = []
    for order, rows in results:
        got = _metrics_from_scores(rows, order, dataset, split, cutoffs, denom)
        for k in cutoffs:
            per[k].extend(got[k])
        all_users.extend(order.tolist())

    per_recall = {k: np.asarray([a for a, _ in per[k]]) for k in cutoffs}
    per_ndcg = {k: np.asarray([b for _, b in per[k]]) for k in cutoffs}
    return MetricReport(
        cutoffs=tuple(cutoffs),
        recall={k: float(per_recall[k].mean()) for k in cutoffs},
        ndcg={k: float(per_ndcg[k].mean()) for k in cutoffs},
        per_user_recall=per_recall,
        per_user_ndcg=per_ndcg,
        user_ids=np.asarray(all_users, dtype=np.int64),
        strategy=strategy,
        n_envs=n_envs,
    )


def popularity_scores(dataset: dataio.Dataset) -> np.ndarray:
    """Training-split interaction counts per item (the sanity-floor ranker)."""
    counts = np.zeros(dataset.n_items)
    train_rows = dataset.split_of == dataio.TRAIN
    np.add.at(counts, dataset.item_of[train_rows], 1.0)
    return counts


def evaluate_popularity(dataset: dataio.Dataset, split: int,
                        cutoffs: tuple[int, ...] = (10, 20),
                        denom: str = "relevant") -> MetricReport:
    """Same protocol as the model evaluation, scores = global popularity."""
    users = _eligible_users(dataset, split)
    scores = popularity_scores(dataset)
    rows = np.tile(scores, (len(users), 1))
    per = _metrics_from_scores(rows, users, dataset, split, cutoffs, denom)
    per_recall = {k: np.asarray([a for a, _ in per[k]]) for k in cutoffs}
    per_ndcg = {k: np.asarray([b for _, b in per[k]]) for k in cutoffs}
    return MetricReport(tuple(cutoffs),
                        {k: float(per_recall[k].mean()) for k in cutoffs},
                        {k: float(per_ndcg[k].mean()) for k in cutoffs},
                        per_recall, per_ndcg, users, "popularity", 0)


# ---------------------------------------------------------------------------
# case-study statistics

KL_SMOOTHING = 1e-3


def category_histogram(items: np.ndarray, item_categories: np.ndarray,
                       n_categories: int) -> np.ndarray:
    hist = np.zeros(n_categories)
    np.add.at(hist, item_categories[np.asarray(items, dtype=np.int64)], 1.0)
    return hist


def category_kl(hist_p: np.ndarray, hist_q: np.ndarray,
                smoothing: float = KL_SMOOTHING, symmetrized: bool = False) -> float:
    """KL(p || q) between additively smoothed category histograms."""
    def norm(h):
        h = np.asarray(h, dtype=np.float64) + smoothing
        return h / h.sum()

    p, q = norm(hist_p), norm(hist_q)
    fwd = float(np.sum(p * np.log(p / q)))
    if not symmetrized:
        return fwd
    rev = float(np.sum(q * np.log(q / p)))
    return 0.5 * (fwd + rev)


def repr_distance(z_a: np.ndarray, z_b: np.ndarray) -> float:
    z_a, z_b = np.asarray(z_a), np.asarray(z_b)
    if z_a.shape != z_b.shape:
        raise ValueError("representation vectors must have equal length")
    return float(np.linalg.norm(z_a - z_b))


def user_shift_profile(dataset: dataio.Dataset, params: ParamStore,
                       dims: m.ModelDims, item_categories: np.ndarray,
                       n_categories: int, n_envs: int,
                       user_ids: np.ndarray | None = None,
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-user mean consecutive-environment category KL and z distance."""
    if user_ids is None:
        user_ids = np.asarray([u for u in range(dataset.n_users)
                               if dataset.train_items(u).size >= 2], dtype=np.int64)
    kls, dists, kept = [], [], []
    for group in inference.roll_states(dataset, user_ids, params, dims, n_envs):
        if group.n_envs < 2:
            continue
        for row, u in enumerate(group.user_ids):
            env = dataio.divide_environments(dataset.train_items(int(u)), group.n_envs)
            pair_kl, pair_d = [], []
            for t in range(group.n_envs - 1):
                h_t = category_histogram(env.slices[t], item_categories, n_categories)
                h_n = category_histogram(env.slices[t + 1], item_categories, n_categories)
                pair_kl.append(category_kl(h_t, h_n))
                pair_d.append(repr_distance(group.z_means[t][row],
                                            group.z_means[t + 1][row]))
            kls.append(float(np.mean(pair_kl)))
            dists.append(float(np.mean(pair_d)))
            kept.append(int(u))
    return np.asarray(kept, dtype=np.int64), np.asarray(kls), np.asarray(dists)


@dataclass
class ShiftGroupReport:
    """Users ranked by category-KL shift and partitioned into groups."""

    group_sizes: list[int]
    mean_kl: list[float]
    mean_distance: list[float]
    recall: dict[int, list[float]]
    ndcg: dict[int, list[float]]
    spearman_kl_distance: float

    def to_text(self) -> str:
        lines = [f"groups = {len(self.group_sizes)}",
                 f"spearman_kl_distance = {self.spearman_kl_distance:.4f}"]
        for g in range(len(self.group_sizes)):
            parts = [f"group={g}", f"size={self.group_sizes[g]}",
                     f"mean_kl={self.mean_kl[g]:.4f}",
                     f"mean_distance={self.mean_distance[g]:.4f}"]
            for k in sorted(self.recall):
                parts.append(f"recall@{k}={self.recall[k][g]:.4f}")
                parts.append(f"ndcg@{k}={self.ndcg[k][g]:.4f}")
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"


def shift_groups(dataset: dataio.Dataset, params: ParamStore, dims: m.ModelDims,
                 item_categories: np.ndarray, n_categories: int, n_groups: int,
                 n_envs: int, split: int = dataio.TEST, strategy: str = "latest-z",
                 cutoffs: tuple[int, ...] = (10,)) -> ShiftGroupReport:
    """Rank users by mean cross-environment category KL, split into equal
    groups, and report per-group metrics and representation distances."""
    users, kls, dists = user_shift_profile(dataset, params, dims,
                                           item_categories, n_categories, n_envs)
    if len(users) < n_groups:
        raise ValueError(f"{len(users)} users cannot fill {n_groups} groups")
    report = evaluate_params(params, dims, dataset, split, strategy, n_envs,
                             cutoffs=cutoffs)
    metric_pos = {int(u): i for i, u in enumerate(report.user_ids)}

    order = np.argsort(kls, kind="stable")
    group_idx = np.array_split(order, n_groups)
    sizes, g_kl, g_dist = [], [], []
    g_recall = {k: [] for k in cutoffs}
    g_ndcg = {k: [] for k in cutoffs}
    for idx in group_idx:
        sizes.append(len(idx))
        g_kl.append(float(kls[idx].mean()))
        g_dist.append(float(dists[idx].mean()))
        rows = [metric_pos[int(users[i])] for i in idx if int(users[i]) in metric_pos]
        for k in cutoffs:
            if rows:
                g_recall[k].append(float(report.per_user_recall[k][rows].mean()))
                g_ndcg[k].append(float(report.per_user_ndcg[k][rows].mean()))
            else:
                g_recall[k].append(float("nan"))
                g_ndcg[k].append(float("nan"))
    rho = float(_stats.spearmanr(g_kl, g_dist).statistic)
    return ShiftGroupReport(sizes, g_kl, g_dist, g_recall, g_ndcg, rho)
