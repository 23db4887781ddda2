"""
Universal transforms and adversarial retraining
===============================================

Learn one transform per source class that sends any of its series to a
target class, then retrain the classifier with attacked copies of the
training data and compare certified accuracy before and after.
"""

from tsastat import attacks, certify, data, models

ds = data.split(data.znormalize(data.gen_cbf(100, seed=1)), (0.5, 0.0, 0.5), seed=1)
Xtr, ytr = ds.arrays("train")
Xte, yte = ds.arrays("test")
net, _ = models.train(models.init_network("A1", ds.shape, 3, seed=1), Xtr, ytr, epochs=20, seed=1)

history = []
bundle = attacks.universal_attack(net, Xtr, target=2, cfg=attacks.AttackConfig(target_class=2),
                                  max_epochs=10, history=history)
print("training fooling rate per pass:", [round(h["fooling_rate"], 3) for h in history])
print("held-out fooling rate:", round(attacks.universal_fooling_rate(net, bundle, Xte), 3))

# %%
# Retrain with attacked copies (fewer iterations keep this quick).
cfg = attacks.AttackConfig(max_iters=500)
new, report = attacks.adversarial_train(net, Xtr, ytr, kind="tsastat", cfg=cfg, epochs=5,
                                        X_test=Xte, y_test=yte)
print(f"clean accuracy {report['clean_acc_before']:.3f} -> {report['clean_acc_after']:.3f}")

noise = certify.NoiseSpec([0.1], [[0.1]], sample_count=1000)
grid = [0.0, 0.1, 0.2, 0.4]
for name, m in (("original", net), ("retrained", new)):
    curve = certify.certification_curve(certify.certify_batch(m, Xte[:30], noise), yte[:30], grid)
    print(name, [round(float(v), 2) for v in curve[:, 1]])
