"""Per-channel statistical features of time series and the distances built on them.

All moments are population moments (divide by ``T``).  Inputs are arrays
whose last two axes are ``(channels, time)``; any leading axes are treated
as a batch.
"""

from __future__ import annotations

import enum
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad

__all__ = [
    "StatFeature",
    "StatFeatureVector",
    "DegenerateChannelError",
    "NonDifferentiableFeatureError",
    "SKEW_POOL",
    "KURT_POOL",
    "CANDIDATE_POOL",
    "DIFFERENTIABLE",
    "compute_feature",
    "feature_set",
    "stat_distance",
    "feature_node",
    "stat_loss_node",
    "reference_features",
    "parse_features",
]

MODE_BINS = 16


class StatFeature(str, enum.Enum):
    MEAN = "mean"
    STD = "std"
    SKEWNESS = "skewness"
    KURTOSIS = "kurtosis"
    RMS = "rms"
    MEDIAN = "median"
    MODE = "mode"
    IQR = "iqr"
    AUTOCORRELATION = "autocorrelation"
    IDENTITY = "identity"


class StatFeatureVector(NamedTuple):
    feature: StatFeature
    values: np.ndarray


class DegenerateChannelError(ValueError):
    """A channel is too short or has zero spread for the requested feature."""


class NonDifferentiableFeatureError(ValueError):
    pass


F = StatFeature
SKEW_POOL = (F.MEAN, F.STD, F.SKEWNESS, F.RMS)
KURT_POOL = (F.MEAN, F.STD, F.KURTOSIS, F.RMS)
CANDIDATE_POOL = (F.MEAN, F.STD, F.MEDIAN, F.MODE, F.IQR, F.SKEWNESS, F.KURTOSIS, F.RMS,
                  F.AUTOCORRELATION)
DIFFERENTIABLE = frozenset({F.MEAN, F.STD, F.SKEWNESS, F.KURTOSIS, F.RMS, F.IDENTITY})

_ALIASES = {"mu": F.MEAN, "sigma": F.STD, "stddev": F.STD, "skew": F.SKEWNESS, "kurt": F.KURTOSIS,
            "ac": F.AUTOCORRELATION, "iq": F.IQR}


def parse_features(spec) -> tuple[StatFeature, ...]:
    """Accept feature ids, their string values, or a comma-separated string.

    The shortcuts ``"skew-pool"`` and ``"kurt-pool"`` name the two default sets.
    """
    if isinstance(spec, str):
        if spec in ("skew-pool", "default"):
            return SKEW_POOL
        if spec == "kurt-pool":
            return KURT_POOL
        spec = [s for s in spec.split(",") if s.strip()]
    out = []
    for s in spec:
        if isinstance(s, StatFeature):
            out.append(s)
            continue
        key = str(s).strip().lower()
        out.append(_ALIASES[key] if key in _ALIASES else StatFeature(key))
    if not out:
        raise ValueError("feature list is empty")
    return tuple(out)


def _spread(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = x.mean(axis=-1)
    c = x - mu[..., None]
    sigma = np.sqrt((c ** 2).mean(axis=-1))
    return mu, c, sigma


def _require_spread(sigma, mu, feature):
    tiny = 1e-12 * np.maximum(1.0, np.abs(mu))
    if np.any(sigma <= tiny):
        raise DegenerateChannelError(f"{feature.value}: channel with zero standard deviation")


def _mode(x: np.ndarray) -> np.ndarray:
    flat = x.reshape(-1, x.shape[-1])
    out = np.empty(flat.shape[0])
    for i, row in enumerate(flat):
        lo, hi = row.min(), row.max()
        if hi == lo:
            out[i] = lo
            continue
        counts, edges = np.histogram(row, bins=MODE_BINS, range=(lo, hi))
        j = int(np.argmax(counts))
        out[i] = 0.5 * (edges[j] + edges[j + 1])
    return out.reshape(x.shape[:-1])


def compute_feature(x, feature) -> np.ndarray:
    """Per-channel value of ``feature`` for a ``(..., n, T)`` array.

    ``IDENTITY`` returns the series itself.  Mode uses the midpoint of the most
    populated of 16 equal-width bins.
    """
    feature = StatFeature(feature)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError(f"expected a (..., channels, time) array, got shape {x.shape}")
    T = x.shape[-1]
    if feature is F.IDENTITY:
        return x.copy()
    if feature is F.MEAN:
        return x.mean(axis=-1)
    if feature is F.RMS:
        return np.sqrt((x ** 2).mean(axis=-1))
    if feature is F.MEDIAN:
        return np.median(x, axis=-1)
    if feature is F.IQR:
        q75, q25 = np.percentile(x, [75, 25], axis=-1)
        return q75 - q25
    if feature is F.MODE:
        return _mode(x)
    if T < 2:
        raise DegenerateChannelError(f"{feature.value} needs at least 2 time steps, got {T}")
    mu, c, sigma = _spread(x)
    if feature is F.STD:
        return sigma
    _require_spread(sigma, mu, feature)
    if feature is F.SKEWNESS:
        return (c ** 3).mean(axis=-1) / sigma ** 3
    if feature is F.KURTOSIS:
        return (c ** 4).mean(axis=-1) / sigma ** 4 - 3.0
    if feature is F.AUTOCORRELATION:
        return (c[..., :-1] * c[..., 1:]).sum(axis=-1) / (T * sigma ** 2)
    raise AssertionError(feature)


def feature_set(x, ids: Sequence) -> list[StatFeatureVector]:
    ids = parse_features(ids)
    return [StatFeatureVector(f, compute_feature(x, f)) for f in ids]


def _norm(diff: np.ndarray, norm: str, batch_ndim: int) -> np.ndarray:
    flat = diff.reshape(diff.shape[:batch_ndim] + (-1,))
    if norm == "linf":
        return np.abs(flat).max(axis=-1)
    if norm == "l2":
        return np.sqrt((flat ** 2).sum(axis=-1))
    raise ValueError(f"norm must be 'linf' or 'l2', got {norm!r}")


def stat_distance(a, b, ids, norm: str = "linf"):
    """Sum over features of the channel-norm of the feature difference.

    Returns a float for single series and an array for batches.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    norm = norm.lower()
    batch = a.ndim - 2
    total = np.zeros(a.shape[:batch])
    for f in parse_features(ids):
        total = total + _norm(compute_feature(a, f) - compute_feature(b, f), norm, batch)
    return float(total) if batch == 0 else total


def feature_node(x: ad.Node, feature) -> ad.Node:
    """Graph node computing a differentiable feature of ``x`` (shape ``(..., n, T)``)."""
    feature = StatFeature(feature)
    if feature not in DIFFERENTIABLE:
        raise NonDifferentiableFeatureError(f"{feature.value} cannot be used in a loss")
    if feature is F.IDENTITY:
        return x
    if feature is F.MEAN:
        return ad.mean(x, axis=-1)
    if feature is F.RMS:
        return ad.sqrt(ad.mean(x ** 2, axis=-1))
    c = x - ad.mean(x, axis=-1, keepdims=True)
    var = ad.mean(c ** 2, axis=-1)
    if feature is F.STD:
        return ad.sqrt(var)
    if feature is F.SKEWNESS:
        return ad.mean(c ** 3, axis=-1) / ad.sqrt(var) ** 3
    return ad.mean(c ** 4, axis=-1) / var ** 2 - 3.0


def reference_features(reference, ids) -> dict:
    """Feature arrays of a fixed reference batch, keyed by feature id."""
    return {f: compute_feature(reference, f) for f in parse_features(ids)}


def stat_loss_node(transformed: ad.Node, reference, ids, norm: str = "linf") -> ad.Node:
    """Differentiable statistical loss between ``transformed`` and a fixed reference.

    ``reference`` is either a ``(..., n, T)`` array, whose features are embedded
    as constants, or a mapping from feature id to a node holding that
    feature's reference values (so one graph can serve many references).  The
    result has the batch shape of the reference: a scalar for a single series.
    """
    ids = parse_features(ids)
    for f in ids:
        if f not in DIFFERENTIABLE:
            raise NonDifferentiableFeatureError(f"{f.value} cannot be used in a loss")
    norm = norm.lower()
    if norm not in ("linf", "l2"):
        raise ValueError(f"norm must be 'linf' or 'l2', got {norm!r}")
    g = transformed.graph
    if not isinstance(reference, dict):
        reference = np.asarray(reference, dtype=np.float64)
        reference = {f: g.constant(v, name=f"ref_{f.value}")
                     for f, v in reference_features(reference, ids).items()}
    reduce = ad.amax if norm == "linf" else ad.l2norm
    total = None
    for f in ids:
        diff = feature_node(transformed, f) - reference[f]
        if norm == "linf":
            diff = ad.absolute(diff)
        term = reduce(diff, axis=-1)
        if f is F.IDENTITY:
            term = reduce(term, axis=-1)
        total = term if total is None else total + term
    return total
