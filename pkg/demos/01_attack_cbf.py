"""
Polynomial attacks on cylinder-bell-funnel series
=================================================

Train a small convolutional classifier on generated CBF data, then look for
polynomial transforms that push test series to another class while keeping
their mean, spread, skewness and RMS close to the original.
"""

import numpy as np

from tsastat import attacks, data, features, models

# generate 200 series per class and keep half of them for testing
ds = data.split(data.znormalize(data.gen_cbf(200, seed=0)), (0.5, 0.0, 0.5), seed=0)
Xtr, ytr = ds.arrays("train")
Xte, yte = ds.arrays("test")

net = models.init_network("A1", ds.shape, ds.class_count, seed=0)
net, history = models.train(net, Xtr, ytr, epochs=20, seed=0)
print(f"clean test accuracy: {models.accuracy(net, Xte, yte):.3f}")

# %%
# Attack 20 test series, each towards the class after its prediction.
X = Xte[:20]
targets = (net.predict(X) + 1) % 3
cfg = attacks.AttackConfig(degree=2, features="skew-pool")
results = attacks.attack_many(net, X, targets, cfg)
print(f"alpha_eff on 20 series: {attacks.alpha_eff(results):.2f}")

# %%
# The statistics of a successful example barely move.
r = next(r for r in results if r.succeeded)
x = X[r.instance_id]
for f in features.SKEW_POOL:
    before = features.compute_feature(x, f)[0]
    after = features.compute_feature(r.adversarial, f)[0]
    print(f"{f.value:>9}: {before:+.4f} -> {after:+.4f}")
print("iterations used:", r.iterations_used, " final loss:", round(r.final_loss, 3))
print("largest pointwise change:", float(np.abs(r.adversarial - x).max()))
