"""Batched multi-environment training with Adam, early stopping on
validation Recall@10, and binary checkpointing.

Per step, every user in the batch is unrolled over the T_t training
environments, the multi-objective loss is assembled on one graph, and a
single backward pass (which itself differentiates through the
per-environment gradient computations when the variance penalty is on)
produces the update direction. Training is bit-reproducible for a fixed
seed: all randomness flows through counter-based streams keyed by
(seed, epoch, environment, purpose).
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import autodiff as ad
from . import dataio
from . import evaluation
from . import model as m
from . import objective as obj
from .autodiff import ParamStore

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CDRC"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """All hyperparameters. Defaults follow the tuned full-scale settings;
    desk-scale runs override the sizes."""

    n_train_envs: int = 3          # T_t
    n_infer_envs: int = 3          # T_i
    feat_dim: int = 200            # K
    pref_dim: int = 200            # H
    n_channels: int = 2            # C
    enc_hidden: tuple[int, ...] = (800,)
    lambda1: float = 0.6
    lambda2: float = 0.5
    lambda3: float = 1e-4
    sigma_eps: float = 0.5
    learning_rate: float = 1e-4
    batch_size: int = 500
    dropout: float = 0.5
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    penalty_subset: str = "decoder"
    mc_samples: int = 1
    anneal_frac: float = 0.2
    normalize_by_count: bool = False
    eval_cutoff: int = 10

    def __post_init__(self):
        if self.n_train_envs < 1 or self.n_infer_envs < 1 or self.n_channels < 1:
            raise ValueError("environment and channel counts must be >= 1")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be >= 0")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if self.sigma_eps <= 0:
            raise ValueError("sigma_eps must be > 0")

    def dims(self, n_items: int) -> m.ModelDims:
        return m.ModelDims(n_items, self.feat_dim, self.pref_dim,
                           self.n_channels, tuple(self.enc_hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_hidden"] = list(self.enc_hidden)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "enc_hidden" in d:
            d["enc_hidden"] = tuple(d["enc_hidden"])
        return TrainConfig(**d)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int

    @staticmethod
    def zeros(size: int) -> "AdamState":
        return AdamState(np.zeros(size), np.zeros(size), 0)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """Standard bias-corrected Adam; mutates `state`, returns new parameters."""
    if grad.shape != theta.shape:
        raise ad.ShapeError("gradient does not align with parameters")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    n_items: int
    params: ParamStore
    adam: AdamState
    epoch: int
    best_metric: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    stopped_early: bool
    diverged: bool


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "n_items": ckpt.n_items,
        "epoch": ckpt.epoch,
        "best_metric": ckpt.best_metric,
        "adam_t": ckpt.adam.t,
        "params": [{"name": n, "shape": list(ckpt.params[n].shape)}
                   for n in ckpt.params.names()],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<B", CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in ckpt.params.names():
            fh.write(ckpt.params[name].astype("<f8").tobytes())
        fh.write(ckpt.adam.m.astype("<f8").tobytes())
        fh.write(ckpt.adam.v.astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        config = TrainConfig.from_dict(header["config"])
        params = ParamStore()
        for spec in header["params"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise ValueError(f"{path}: truncated checkpoint")
            params.add(spec["name"], np.frombuffer(raw, dtype="<f8").reshape(shape))
        size = params.size
        adam_m = np.frombuffer(fh.read(8 * size), dtype="<f8").copy()
        adam_v = np.frombuffer(fh.read(8 * size), dtype="<f8").copy()
        if adam_m.size != size or adam_v.size != size:
            raise ValueError(f"{path}: truncated optimizer state")
    expected = m.init_params(config.dims(header["n_items"]), seed=0).shapes()
    if params.shapes() != expected:
        raise ValueError(f"{path}: parameter shapes do not match the stored config")
    return Checkpoint(header["version"], config, header["n_items"], params,
                      AdamState(adam_m, adam_v, header["adam_t"]),
                      header["epoch"], header["best_metric"])


def _batch_multihot(slices: list[dataio.EnvSlices], rows: np.ndarray,
                    env: int, n_items: int) -> np.ndarray:
    return np.stack([dataio.to_multihot(slices[r].slices[env], n_items)
                     for r in rows])


def _draw_batch_noise(streams: m.NoiseStreams, cfg: TrainConfig,
                      dims: m.ModelDims, epoch: int, step: int,
                      user_ids: np.ndarray) -> obj.BatchNoise:
    e_noise = [streams.user_rows(epoch, t, m.Purpose.E_NOISE, user_ids, dims.feat_dim)
               for t in range(cfg.n_train_envs)]
    z_noise = [[streams.user_rows(epoch, t, m.Purpose.Z_NOISE, user_ids,
                                  dims.pref_dim, sample=s)
                for s in range(cfg.mc_samples)]
               for t in range(cfg.n_train_envs)]
    gate_a = cfg.sigma_eps * streams.matrix(epoch, step, m.Purpose.GATE_ALPHA,
                                            (dims.pref_dim, dims.n_channels))
    gate_b = cfg.sigma_eps * streams.matrix(epoch, step, m.Purpose.GATE_BETA,
                                            (dims.n_items, dims.n_channels))
    drop = [streams.dropout_masks(epoch, t, user_ids, dims.n_items, cfg.dropout)
            for t in range(cfg.n_train_envs)]
    return obj.BatchNoise(e_noise, z_noise, gate_a, gate_b, drop)


def train(dataset: dataio.Dataset, cfg: TrainConfig,
          log_cb=None) -> TrainResult:
    """Run the full optimization; returns the best checkpoint by validation
    Recall@10 together with the per-epoch history."""
    dims = cfg.dims(dataset.n_items)
    kept, slices = dataio.environmentize(dataset, cfg.n_train_envs)
    if not kept:
        raise ValueError("no users with enough training interactions")
    kept = np.asarray(kept, dtype=np.int64)
    row_of = {int(u): r for r, u in enumerate(kept)}

    params = m.init_params(dims, cfg.seed)
    adam = AdamState.zeros(params.size)
    streams = m.NoiseStreams(cfg.seed, dataset.n_users)
    penalty_names = m.penalty_param_names(params, cfg.penalty_subset)

    steps_per_epoch = int(np.ceil(len(kept) / cfg.batch_size))
    warmup = 0 if cfg.anneal_frac <= 0 else max(
        1, int(cfg.anneal_frac * steps_per_epoch * cfg.max_epochs))
    schedule = obj.AnnealSchedule(cfg.lambda1, warmup)

    best_metric = -np.inf
    best_params = params.copy()
    best_epoch = -1
    bad_epochs = 0
    history: list[dict] = []
    diverged = False
    global_step = 0

    for epoch in range(cfg.max_epochs):
        tic = time.perf_counter()
        perm = streams.permutation(epoch)
        epoch_users = np.asarray([u for u in perm if int(u) in row_of],
                                 dtype=np.int64)
        sums = {"total": 0.0, "recon": 0.0, "kl": 0.0, "l0": 0.0, "penalty": 0.0}
        lam1 = cfg.lambda1
        finite = True
        for step in range(steps_per_epoch):
            batch = epoch_users[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            if batch.size == 0:
                continue
            rows = np.asarray([row_of[int(u)] for u in batch])
            x_envs = [_batch_multihot(slices, rows, t, dims.n_items)
                      for t in range(cfg.n_train_envs)]
            noise = _draw_batch_noise(streams, cfg, dims, epoch, step, batch)
            lam1 = obj.effective_lambda1(schedule, global_step)

            graph = ad.Graph()
            binding = params.bind(graph)
            total, br = obj.assemble_loss(
                binding, dims, x_envs, noise, lam1, cfg.lambda2, cfg.lambda3,
                cfg.sigma_eps, penalty_names, cfg.normalize_by_count)
            if not np.isfinite(br.total):
                log.error("non-finite loss at epoch %d step %d; aborting", epoch, step)
                finite = False
                diverged = True
                break
            grad = ad.gradient_vector(total, binding, params)
            params.unflatten(adam_step(params.flatten(), grad, adam,
                                       cfg.learning_rate))
            global_step += 1
            sums["total"] += br.total
            sums["recon"] += sum(br.recon)
            sums["kl"] += sum(br.kl)
            sums["l0"] += br.l0
            sums["penalty"] += br.penalty
        if not finite:
            break

        report = evaluation.evaluate_params(
            params, dims, dataset, dataio.VALIDATION, "latest-z",
            cfg.n_train_envs, cutoffs=(cfg.eval_cutoff,))
        val_recall = report.recall[cfg.eval_cutoff]
        val_ndcg = report.ndcg[cfg.eval_cutoff]
        row = {
            "epoch": epoch,
            "loss": sums["total"] / steps_per_epoch,
            "recon": sums["recon"] / steps_per_epoch,
            "kl": sums["kl"] / steps_per_epoch,
            "l0": sums["l0"] / steps_per_epoch,
            "penalty": sums["penalty"] / steps_per_epoch,
            "lambda1": lam1,
            f"val_recall@{cfg.eval_cutoff}": val_recall,
            f"val_ndcg@{cfg.eval_cutoff}": val_ndcg,
            "seconds": time.perf_counter() - tic,
        }
        history.append(row)
        if log_cb is not None:
            log_cb(format_log_row(row))

        if val_recall > best_metric:
            best_metric = val_recall
            best_params = params.copy()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    stopped_early = bad_epochs >= cfg.patience
    ckpt = Checkpoint(CKPT_VERSION, cfg, dataset.n_items, best_params, adam,
                      best_epoch, float(best_metric))
    return TrainResult(ckpt, history, stopped_early, diverged)


def format_log_row(row: dict) -> str:
    parts = []
    for key, val in row.items():
        if isinstance(val, float):
            parts.append(f"{key}={val:.6g}")
        else:
            parts.append(f"{key}={val}")
    return " ".join(parts)
