"""Scratch: tune desk-scale configs for the aux-effect experiments."""
import sys
import time

import numpy as np

from fanin.clustering import balanced_kmeans, build_label_features, random_clustering
from fanin.data import generate_synthetic, compute_propensities
from fanin.model import ModelConfig
from fanin.rewire import RewireConfig
from fanin.train import TrainConfig, train, evaluate, evaluate_meta

P = dict(N=5000, L=1000, d_in=1024, zipf=1.2, k=3, noise=0.3, cnnz=16,
         epochs=15, batch=32, lr_enc=1e-3, lr_clf=1e-2, warmup=100,
         interval=100, frac=0.25, K=16, cutoff=8, dims=(256,), alpha=1.0,
         dropout=0.0, ntest=1500)
for arg in sys.argv[1:]:
    k, v = arg.split("=")
    P[k] = eval(v)

train_set = generate_synthetic(P["N"], P["L"], P["d_in"], P["zipf"], P["k"],
                               seed=1, noise=P["noise"], center_nnz=P["cnnz"])
test_set = generate_synthetic(P["ntest"], P["L"], P["d_in"], P["zipf"], P["k"],
                              seed=2, noise=P["noise"], center_nnz=P["cnnz"])
feats = build_label_features(train_set)
bal = balanced_kmeans(feats, P["K"], seed=3)
rand = random_clustering(P["L"], P["K"], seed=4)
props = compute_propensities(train_set.label_counts(), P["N"])

def run(name, fan_in, aux, cutoff, clustering=None):
    t0 = time.time()
    cfg = TrainConfig(
        epochs=P["epochs"], batch_size=P["batch"], lr_encoder=P["lr_enc"],
        lr_classifier=P["lr_clf"], warmup_steps=P["warmup"], seed=11,
        precision="float32", dropout=P["dropout"],
        rewire=RewireConfig(mode="fraction", rewire_fraction=P["frac"],
                            interval=P["interval"]),
        model=ModelConfig(encoder_dims=P["dims"], fan_in=fan_in,
                          aux_enabled=aux, aux_cutoff_epoch=cutoff,
                          aux_initial_scale=P["alpha"],
                          loss="squared_hinge"))
    model, tel = train(train_set, None, clustering, cfg)
    rep = evaluate(model, test_set, propensities=props)
    extra = ""
    if aux:
        meta = evaluate_meta(model, test_set, clustering)
        extra = f" metaP@1={meta['metaP@1']:.3f}"
    print(f"{name:16s} P@1={rep['P@1']:.4f} P@5={rep['P@5']:.4f} "
          f"PSP@1={rep['PSP@1']:.4f}{extra}  [{time.time()-t0:.0f}s]")
    return rep

F92 = max(1, round(P["dims"][-1] * 0.08))
F50 = P["dims"][-1] // 2
print(f"F92={F92} F50={F50} params={P}")
r_noaux92 = run("noaux@92", F92, False, None)
r_aux92 = run("aux@92 bal", F92, True, P["cutoff"], bal)
r_nocut92 = run("aux@92 nocut", F92, True, None, bal)
r_aux92r = run("aux@92 rand", F92, True, P["cutoff"], rand)
r_noaux50 = run("noaux@50", F50, False, None)
r_aux50 = run("aux@50 bal", F50, True, P["cutoff"], bal)
print(f"gap92={r_aux92['P@1']-r_noaux92['P@1']:+.4f} (need >= +0.03)")
print(f"gap50={r_aux50['P@1']-r_noaux50['P@1']:+.4f} (need < +0.02)")
print(f"cutoff_vs_nocut={r_aux92['P@1']-r_nocut92['P@1']:+.4f} (need > 0)")
print(f"nocut_vs_noaux={r_nocut92['P@1']-r_noaux92['P@1']:+.4f}")
print(f"bal_vs_rand_extreme={r_aux92['P@1']-r_aux92r['P@1']:+.4f} (need |.| <= 0.02)")
