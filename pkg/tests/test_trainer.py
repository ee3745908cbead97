import numpy as np
import pytest

import driftrec.model as m
from driftrec import dataio, evaluation, synthgen, trainer


def small_config(**kw):
    base = dict(n_train_envs=2, n_infer_envs=2, feat_dim=8, pref_dim=8,
                n_channels=2, enc_hidden=(16,), lambda1=0.5, lambda2=0.2,
                lambda3=1e-4, sigma_eps=0.5, learning_rate=3e-3, batch_size=30,
                dropout=0.2, max_epochs=4, patience=10, seed=0)
    base.update(kw)
    return trainer.TrainConfig(**base)


def small_dataset(seed=0, users=40):
    cfg = synthgen.SynthConfig(n_users=users, n_items=30, n_categories=2,
                               latent_dim=4, n_envs=4, n_per_env=8, seed=seed)
    ds, _ = synthgen.generate(cfg)
    return ds


# ---------------------------------------------------------------------------
# Adam

def test_adam_zero_gradient_is_noop():
    state = trainer.AdamState.zeros(3)
    theta = np.array([1.0, -2.0, 0.5])
    out = trainer.adam_step(theta, np.zeros(3), state, lr=0.1)
    assert np.array_equal(out, theta)


def test_adam_first_step_size():
    state = trainer.AdamState.zeros(1)
    out = trainer.adam_step(np.array([1.0]), np.array([1.0]), state, lr=0.1)
    # bias correction makes the first step almost exactly lr
    assert out[0] == pytest.approx(0.9, abs=1e-6)


def test_adam_is_stateful_not_additive():
    # two unit steps differ from one double-length step: statefulness matters
    s1 = trainer.AdamState.zeros(1)
    theta = np.array([1.0])
    theta1 = trainer.adam_step(theta, np.array([1.0]), s1, lr=0.1)
    theta1 = trainer.adam_step(theta1, np.array([1.0]), s1, lr=0.1)
    s2 = trainer.AdamState.zeros(1)
    theta2 = trainer.adam_step(theta, np.array([2.0]), s2, lr=0.1)
    assert theta1[0] != pytest.approx(theta2[0], abs=1e-9)


def test_adam_rejects_misaligned_gradient():
    state = trainer.AdamState.zeros(2)
    with pytest.raises(Exception):
        trainer.adam_step(np.zeros(2), np.zeros(3), state, lr=0.1)


# ---------------------------------------------------------------------------
# checkpoint format

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = small_config()
    params = m.init_params(cfg.dims(30), seed=3)
    adam = trainer.AdamState(np.random.default_rng(0).normal(size=params.size),
                             np.abs(np.random.default_rng(1).normal(size=params.size)),
                             t=17)
    ckpt = trainer.Checkpoint(trainer.CKPT_VERSION, cfg, 30, params, adam, 5, 0.123)
    path = tmp_path / "model.cdrc"
    trainer.save_checkpoint(path, ckpt)
    back = trainer.load_checkpoint(path)
    assert back.config == cfg
    assert back.epoch == 5 and back.best_metric == 0.123
    assert back.adam.t == 17
    for name in params.names():
        assert np.array_equal(back.params[name], params[name])
    assert np.array_equal(back.adam.m, adam.m)
    assert np.array_equal(back.adam.v, adam.v)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "zzz.cdrc"
    path.write_bytes(b"WHAT" + bytes(64))
    with pytest.raises(ValueError):
        trainer.load_checkpoint(path)


def test_checkpoint_rejects_shape_mismatch(tmp_path):
    import json, struct
    cfg = small_config()
    params = m.init_params(cfg.dims(30), seed=3)
    adam = trainer.AdamState.zeros(params.size)
    ckpt = trainer.Checkpoint(trainer.CKPT_VERSION, cfg, 30, params, adam, 0, 0.0)
    path = tmp_path / "model.cdrc"
    trainer.save_checkpoint(path, ckpt)
    # tamper: claim a wider feature dim in the header config
    raw = path.read_bytes()
    blob_len = struct.unpack("<I", raw[5:9])[0]
    header = json.loads(raw[9:9 + blob_len].decode())
    header["config"]["feat_dim"] = 16
    blob = json.dumps(header).encode()
    path.write_bytes(raw[:5] + struct.pack("<I", len(blob)) + blob + raw[9 + blob_len:])
    with pytest.raises(ValueError, match="shape"):
        trainer.load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    cfg = small_config()
    params = m.init_params(cfg.dims(30), seed=3)
    ckpt = trainer.Checkpoint(trainer.CKPT_VERSION, cfg, 30, params,
                              trainer.AdamState.zeros(params.size), 0, 0.0)
    path = tmp_path / "model.cdrc"
    trainer.save_checkpoint(path, ckpt)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(ValueError):
        trainer.load_checkpoint(path)


# ---------------------------------------------------------------------------
# training loop

def test_loss_decreases_on_small_instance():
    ds = small_dataset()
    cfg = small_config(max_epochs=15, lambda2=0.0, lambda3=0.0, batch_size=40,
                       learning_rate=1e-3, patience=50, anneal_frac=0.0)
    result = trainer.train(ds, cfg)
    first = result.history[0]["loss"]
    smoothed_last = np.median([h["loss"] for h in result.history[-5:]])
    assert smoothed_last < first


def test_training_is_bit_reproducible():
    ds = small_dataset()
    cfg = small_config(max_epochs=3)
    r1 = trainer.train(ds, cfg)
    r2 = trainer.train(ds, cfg)
    for name in r1.checkpoint.params.names():
        assert np.array_equal(r1.checkpoint.params[name],
                              r2.checkpoint.params[name]), name
    assert r1.history[-1]["loss"] == r2.history[-1]["loss"]


def test_degenerate_config_trains():
    ds = small_dataset()
    cfg = small_config(n_train_envs=1, n_infer_envs=1, n_channels=1,
                       lambda2=0.0, lambda3=0.0, max_epochs=3)
    result = trainer.train(ds, cfg)
    assert np.isfinite(result.history[-1]["loss"])
    assert not result.diverged


def test_early_stopping_returns_best(caplog):
    ds = small_dataset()
    cfg = small_config(max_epochs=25, patience=3)
    result = trainer.train(ds, cfg)
    vals = [h["val_recall@10"] for h in result.history]
    assert result.checkpoint.best_metric == pytest.approx(max(vals))


def test_users_below_env_count_are_dropped(caplog):
    rows = []
    for u in range(12):
        for k in range(16):
            rows.append(dataio.InteractionRecord(f"u{u}", f"i{(u * 3 + k) % 20}",
                                                 5.0, k))
    # one tiny user: 3 train interactions, below T_t=4
    for k in range(3):
        rows.append(dataio.InteractionRecord("tiny", f"i{k}", 5.0, k))
    ds = dataio.temporal_split(rows)
    cfg = small_config(n_train_envs=4, n_infer_envs=4, max_epochs=2,
                       batch_size=16)
    with caplog.at_level("WARNING"):
        result = trainer.train(ds, cfg)
    assert not result.diverged
    assert any("training interactions" in rec.getMessage()
               for rec in caplog.records)


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(n_train_envs=0)
    with pytest.raises(ValueError):
        small_config(dropout=1.0)
    with pytest.raises(ValueError):
        small_config(lambda2=-0.1)
    with pytest.raises(ValueError):
        small_config(sigma_eps=0.0)


def test_config_dict_roundtrip():
    cfg = small_config(enc_hidden=(32, 16))
    assert trainer.TrainConfig.from_dict(cfg.to_dict()) == cfg
