"""
Certifying the mean of a series
===============================

Smooth a classifier with Gaussian noise and turn the empirical class
probabilities into a radius within which the smoothed prediction cannot
change.  A one-channel threshold rule makes the answer checkable by hand.
"""

import numpy as np
from scipy.stats import norm

from tsastat import certify


def mean_rule(X):
    # class 1 when the series mean is positive
    return (X.mean(axis=(1, 2)) > 0).astype(int)


noise = certify.NoiseSpec(mu_P=[0.0], Sigma=[[1.0]], sample_count=5000)
for m in (0.25, 0.5, 1.0, 2.0):
    rep = certify.certify(mean_rule, np.full((1, 1), m), noise, seed=0, label_count=2)
    print(f"mean {m:4.2f}: {rep.verdict.value:<10} radius {rep.delta:.3f}"
          f"  (P[class 1] est {rep.EP[1]:.3f}, exact {norm.cdf(m):.3f})")

# %%
# The radius never exceeds the distance to the decision boundary here.
p = norm.cdf(1.0)
print("radius from exact probabilities at mean 1:", round(certify.theorem2_bound(p, 1 - p, [[1.0]]), 4))

# %%
# A certified mean shift also bounds other statistics of the series.
x = np.sin(np.linspace(0, 6, 64))[None] + 0.3
b = certify.convert_bounds(0.2, x)
print({k: round(b[k], 4) for k in ("rms_literal", "rms_sqrt", "skewness", "kurtosis")})
