"""One-off calibration of the desk-scale acceptance protocol (not shipped)."""
import time
import numpy as np
from driftrec import synthgen, trainer, dataio, evaluation, synthgen as sg
from scipy import stats

DESK = dict(n_train_envs=2, n_infer_envs=2, feat_dim=16, pref_dim=16,
            enc_hidden=(64,), lambda1=0.6, sigma_eps=0.5, batch_size=50,
            learning_rate=3e-3, max_epochs=300, patience=120, dropout=0.3)

def train_one(seed, C, lam2, lam3):
    ds, truth = synthgen.generate(synthgen.SynthConfig(seed=seed))
    tc = trainer.TrainConfig(n_channels=C, lambda2=lam2, lambda3=lam3,
                             seed=seed, **DESK)
    res = trainer.train(ds, tc)
    return ds, truth, tc, res

t_start = time.perf_counter()
w3 = w4 = w5 = w6 = 0
rows = []
for seed in range(10):
    t0 = time.perf_counter()
    ds, truth, tc, res = train_one(seed, 2, 0.5, 1e-4)
    dims = tc.dims(ds.n_items)
    p = res.checkpoint.params
    s1 = evaluation.evaluate_params(p, dims, ds, dataio.TEST, "latest-z", 2,
                                    cutoffs=(10,)).recall[10]
    s2 = evaluation.evaluate_params(p, dims, ds, dataio.TEST, "avg-predictions", 2,
                                    cutoffs=(10,)).recall[10]
    pop = evaluation.evaluate_popularity(ds, dataio.TEST, cutoffs=(10,)).recall[10]
    rec = sg.structure_recovery(p["dec.beta"], truth.item_category, 2)
    _, _, tc1, res1 = train_one(seed, 1, 0.5, 1e-4)
    c1 = evaluation.evaluate_params(res1.checkpoint.params, tc1.dims(ds.n_items),
                                    ds, dataio.TEST, "latest-z", 2,
                                    cutoffs=(10,)).recall[10]
    w3 += s1 > pop; w4 += s1 >= c1; w5 += s1 >= s2; w6 += rec >= 0.65
    rows.append((seed, s1, c1, pop, s2, rec))
    print(f"seed={seed}: full={s1:.4f} C1={c1:.4f} pop={pop:.4f} s2={s2:.4f} "
          f"rec={rec:.3f} epochs={len(res.history)}/{len(res1.history)} "
          f"({time.perf_counter()-t0:.0f}s)", flush=True)

print(f"\ncrit3 beats-pop: {w3}/10")
print(f"crit4 full>=C1:  {w4}/10")
print(f"crit5 s1>=s2:    {w5}/10")
print(f"crit6 rec>=0.65: {w6}/10")

# criterion 7 on seed 0's full model
ds, truth, tc, res = train_one(0, 2, 0.5, 1e-4)
rep = evaluation.shift_groups(ds, res.checkpoint.params, tc.dims(ds.n_items),
                              truth.item_category, 2, n_groups=20, n_envs=2)
print(f"crit7 spearman: {rep.spearman_kl_distance:.3f}")
print(f"total {time.perf_counter()-t_start:.0f}s")
