"""Rényi-divergence robustness certificates for a classifier's mean-shift stability.

A series ``x`` is certified by sampling Gaussian noise ``n_P ~ N(mu_P, Sigma)``
and ``n_0 ~ N(0, Sigma)``, comparing the empirical prediction distributions on
``x + n_P`` and ``x + n_0``, and turning the top-two probabilities into a bound
``delta`` on the per-channel mean shift.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .features import DegenerateChannelError

__all__ = [
    "Verdict",
    "Variant",
    "NoiseSpec",
    "CertificationReport",
    "DegenerateCovarianceError",
    "InvalidDistributionError",
    "renyi_discrete",
    "renyi_gaussian",
    "lemma3_lower_bound",
    "theorem2_maximand",
    "theorem2_bound",
    "theorem2_bound_alpha",
    "alpha_grid",
    "certify",
    "certify_batch",
    "certification_curve",
    "write_cert_csv",
    "convert_bounds",
    "gen_spd_covariance",
]

CERT_FORMAT = "tsastat-cert-v1"
ALPHA_MIN = 1.0 + 2.0 ** -10
ALPHA_MAX = 64.0
GRID_POINTS = 512
CHUNK = 500


class Verdict(str, enum.Enum):
    CERTIFIED = "Certified"
    CERTIFIED_TRIVIALLY = "CertifiedTrivially"
    DECLINED = "Declined"


class Variant(str, enum.Enum):
    PAPER_LITERAL = "PaperLiteral"
    INVERSE_FORM = "InverseForm"


class DegenerateCovarianceError(ValueError):
    pass


class InvalidDistributionError(ValueError):
    pass


# -- divergences ------------------------------------------------------------


def _check_alpha(alpha):
    if not alpha > 0 or alpha == 1:
        raise ValueError(f"alpha must be positive and different from 1, got {alpha}")


def _distribution(p, name):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0:
        raise InvalidDistributionError(f"{name} must be a nonempty vector")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise InvalidDistributionError(f"{name} is not a probability vector")
    return p


def renyi_discrete(P, Q, alpha: float) -> float:
    """``D_alpha(P || Q) = ln(sum_i P_i^alpha Q_i^(1-alpha)) / (alpha - 1)``.

    Returns ``inf`` when ``alpha > 1`` and ``Q`` misses mass that ``P`` has.
    Tiny negative values from rounding are clipped to zero.
    """
    _check_alpha(alpha)
    P = _distribution(P, "P")
    Q = _distribution(Q, "Q")
    if P.shape != Q.shape:
        raise InvalidDistributionError("P and Q have different lengths")
    if np.array_equal(P, Q):
        return 0.0
    support = P > 0
    if alpha > 1 and np.any(support & (Q == 0)):
        return math.inf
    both = support & (Q > 0)
    if not both.any():
        # alpha < 1 with disjoint supports
        return math.inf
    p, q = P[both], Q[both]
    t = (alpha - 1.0) * (np.log(p) - np.log(q))
    if np.all(np.abs(t) < 1.0):
        # near alpha = 1: sum_i p_i e^t_i - 1 = sum_i p_i expm1(t_i) - (mass of P where Q = 0)
        dropped = P[support & ~both].sum()
        log_s = math.log1p(float(np.sum(p * np.expm1(t))) - dropped)
    else:
        log_s = float(logsumexp(np.log(p) + t))
    return max(0.0, log_s / (alpha - 1.0))


def _spd_logdet(S, name):
    sign, logdet = np.linalg.slogdet(S)
    if sign <= 0:
        raise DegenerateCovarianceError(f"{name} is not positive definite")
    return logdet


def renyi_gaussian(mu1, Sigma1, mu2, Sigma2, alpha: float, variant=Variant.PAPER_LITERAL) -> float:
    """Order-``alpha`` divergence between two multivariate Gaussians.

    ``Sigma_a = alpha * Sigma1 + (1 - alpha) * Sigma2``.  The log-determinant
    term is shared by both variants; the quadratic term is
    ``(alpha/2) d' Sigma_a d`` for ``PaperLiteral`` and
    ``(alpha/2) d' Sigma_a^{-1} d`` for ``InverseForm``, with ``d = mu1 - mu2``.

    Both variants keep this weighting of ``Sigma1`` and ``Sigma2``.  The
    standard closed form swaps the two weights, so for unequal covariances
    neither variant equals the true divergence; with equal covariances (the
    only case the certifier uses) ``InverseForm`` is exact.
    """
    _check_alpha(alpha)
    variant = Variant(variant)
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    S1 = np.atleast_2d(np.asarray(Sigma1, dtype=np.float64))
    S2 = np.atleast_2d(np.asarray(Sigma2, dtype=np.float64))
    if not (mu1.shape == mu2.shape and S1.shape == S2.shape == (len(mu1), len(mu1))):
        raise ValueError("mean and covariance shapes do not agree")
    Sa = alpha * S1 + (1.0 - alpha) * S2
    d = mu1 - mu2
    if variant is Variant.INVERSE_FORM:
        try:
            quad = float(d @ np.linalg.solve(Sa, d))
        except np.linalg.LinAlgError:
            raise DegenerateCovarianceError("Sigma_alpha is singular") from None
    else:
        quad = float(d @ Sa @ d)
    logdet = (_spd_logdet(Sa, "Sigma_alpha") - (1.0 - alpha) * _spd_logdet(S1, "Sigma1")
              - alpha * _spd_logdet(S2, "Sigma2"))
    return 0.5 * alpha * quad - logdet / (2.0 * (alpha - 1.0))


# -- the bound --------------------------------------------------------------


def lemma3_lower_bound(p1: float, p2: float, alpha: float) -> float:
    """``-ln(1 - p1 - p2 + 2 * (0.5 * (p1^(1-a) + p2^(1-a)))^(1/(1-a)))``.

    Evaluated in the log domain; ``p2 = 0`` with ``alpha > 1`` uses the limit 0
    for the power mean.  Returns ``inf`` when the log argument is not positive
    and exactly 0 for ties.
    """
    _check_alpha(alpha)
    if not (1.0 >= p1 >= p2 >= 0.0) or p1 + p2 > 1.0 + 1e-12:
        raise ValueError(f"need 1 >= p1 >= p2 >= 0 and p1 + p2 <= 1, got {p1}, {p2}")
    if p1 == p2:
        return 0.0
    e = 1.0 - alpha
    logs = [math.log(p) if p > 0 else -math.inf for p in (p1, p2)]
    terms = [e * lp for lp in logs]
    if alpha > 1 and p2 == 0:
        power_mean = 0.0
    elif alpha < 1 and p2 == 0:
        power_mean = math.exp((terms[0] - math.log(2.0)) / e)
    else:
        power_mean = math.exp((float(logsumexp(terms)) - math.log(2.0)) / e)
    arg = -p1 - p2 + 2.0 * power_mean
    if 1.0 + arg <= 0:
        return math.inf
    return -math.log1p(arg)


def theorem2_maximand(p1: float, p2: float, sigma_sum: float, alpha: float) -> float:
    """``2 / (alpha * Sigma_S) * lemma3_lower_bound(p1, p2, alpha)``, the squared-bound candidate."""
    return 2.0 / (alpha * sigma_sum) * lemma3_lower_bound(p1, p2, alpha)


def alpha_grid(points: int = GRID_POINTS, lo: float = ALPHA_MIN, hi: float = ALPHA_MAX) -> np.ndarray:
    return np.geomspace(lo, hi, points)


def _sigma_sum(Sigma) -> float:
    S = np.atleast_2d(np.asarray(Sigma, dtype=np.float64))
    s = float(S.sum())
    if not s > 0:
        raise DegenerateCovarianceError(f"sum of covariance entries must be positive, got {s}")
    return s


def _golden_max(f, a, b, tol=1e-12, max_iter=200):
    inv = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = b - inv * (b - a), a + inv * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def theorem2_bound_alpha(p1: float, p2: float, Sigma) -> tuple[float, float | None]:
    """``(delta, alpha_star)``; ``alpha_star`` is None when no alpha gives a positive bound."""
    s = _sigma_sum(Sigma)
    if p1 == p2:
        return 0.0, None

    def f(a):
        return theorem2_maximand(p1, p2, s, a)

    grid = alpha_grid()
    vals = np.array([f(a) for a in grid])
    if np.isinf(vals).any():
        return math.inf, float(grid[np.argmax(vals)])
    i = int(np.argmax(vals))
    if not vals[i] > 0:
        return 0.0, None
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    a_star, v_star = _golden_max(f, lo, hi)
    if vals[i] > v_star:
        a_star, v_star = float(grid[i]), float(vals[i])
    return math.sqrt(v_star), float(a_star)


def theorem2_bound(p1: float, p2: float, Sigma) -> float:
    """Certified mean-shift radius from the top-two probabilities and the noise covariance.

    ``delta = sqrt(max_alpha 2 / (alpha * Sigma_S) * lemma3(p1, p2, alpha))`` over
    ``alpha`` in ``(1, 64]``: a 512-point log-spaced grid followed by
    golden-section refinement between the best point's neighbours.
    ``Sigma_S`` is the sum of all entries of ``Sigma``.
    """
    return theorem2_bound_alpha(p1, p2, Sigma)[0]


# -- noise and reports -------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    """Per-channel Gaussian noise ``N(mu_P, Sigma)`` drawn independently at every time step.

    With ``common_random_numbers`` the shifted and centred noise share one
    standard-normal draw; otherwise they are drawn independently.
    """

    mu_P: np.ndarray
    Sigma: np.ndarray
    sample_count: int = 5000
    common_random_numbers: bool = True

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu_P, dtype=np.float64)).copy()
        S = np.atleast_2d(np.asarray(self.Sigma, dtype=np.float64)).copy()
        if mu.ndim != 1 or S.shape != (len(mu), len(mu)):
            raise ValueError(f"mu_P {mu.shape} and Sigma {S.shape} do not agree")
        if not np.allclose(S, S.T, rtol=0, atol=1e-12 * max(1.0, np.abs(S).max())):
            raise DegenerateCovarianceError("Sigma is not symmetric")
        w = np.linalg.eigvalsh(S)
        if w.min() < -1e-10 * max(1.0, abs(w).max()):
            raise DegenerateCovarianceError("Sigma is not positive semi-definite")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        mu.setflags(write=False)
        S.setflags(write=False)
        object.__setattr__(self, "mu_P", mu)
        object.__setattr__(self, "Sigma", S)

    @classmethod
    def isotropic(cls, n: int, mu: float, sigma: float, **kw) -> "NoiseSpec":
        return cls(np.full(n, float(mu)), sigma * np.eye(n), **kw)

    @property
    def channels(self) -> int:
        return len(self.mu_P)

    @property
    def sigma_diag(self) -> np.ndarray:
        return np.diag(self.Sigma).copy()

    @cached_property
    def sigma_sum(self) -> float:
        return float(self.Sigma.sum())

    @cached_property
    def _factor(self) -> np.ndarray:
        w, V = np.linalg.eigh(self.Sigma)
        return V * np.sqrt(np.clip(w, 0.0, None))

    def sample(self, rng: np.random.Generator, m: int, T: int):
        """``(n_P, n_0)`` of shape ``(m, n, T)`` each."""
        L = self._factor
        z = rng.standard_normal((m, T, self.channels))
        base = np.swapaxes(z @ L.T, 1, 2)
        if self.common_random_numbers:
            centred = base
        else:
            centred = np.swapaxes(rng.standard_normal((m, T, self.channels)) @ L.T, 1, 2)
        return base + self.mu_P[:, None], centred

    def to_dict(self) -> dict:
        return {"mu_P": self.mu_P.tolist(), "Sigma": self.Sigma.tolist(), "sample_count": self.sample_count,
                "common_random_numbers": self.common_random_numbers}


@dataclass
class CertificationReport:
    verdict: Verdict
    predicted_label: int
    delta: float
    EP: np.ndarray
    E0: np.ndarray
    alpha_star: float | None
    samples_used: int
    variant: str = Variant.PAPER_LITERAL.value
    counts_P: np.ndarray = field(default=None)
    counts_0: np.ndarray = field(default=None)
    instance_id: int | None = None

    @property
    def certified(self) -> bool:
        return self.verdict is not Verdict.DECLINED

    def to_dict(self) -> dict:
        return {
            "format": CERT_FORMAT,
            "instance_id": self.instance_id,
            "verdict": self.verdict.value,
            "predicted_label": self.predicted_label,
            "delta": self.delta,
            "EP": self.EP.tolist(),
            "E0": self.E0.tolist(),
            "alpha_star": self.alpha_star,
            "samples_used": self.samples_used,
            "variant": self.variant,
            "counts_P": None if self.counts_P is None else self.counts_P.tolist(),
            "counts_0": None if self.counts_0 is None else self.counts_0.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "CertificationReport":
        if d.get("format") != CERT_FORMAT:
            raise ValueError(f"unsupported certificate format {d.get('format')!r}")
        arr = lambda v: None if v is None else np.asarray(v)  # noqa: E731
        return cls(Verdict(d["verdict"]), int(d["predicted_label"]), float(d["delta"]), np.asarray(d["EP"]),
                   np.asarray(d["E0"]), d["alpha_star"], int(d["samples_used"]), d["variant"],
                   arr(d.get("counts_P")), arr(d.get("counts_0")), d.get("instance_id"))


# -- certification ------------------------------------------------------------


def _predictor(net, label_count):
    if hasattr(net, "predict") and hasattr(net, "label_count"):
        return net.predict, net.label_count
    if not callable(net):
        raise TypeError("net must be a Network or a callable batch predictor")
    return net, label_count


def _count(pred_fn, x, noise: NoiseSpec, seed, chunk_index, m, K):
    rng = np.random.default_rng([seed, chunk_index])
    nP, n0 = noise.sample(rng, m, x.shape[-1])
    yp = np.asarray(pred_fn(x + nP)).astype(np.intp).reshape(-1)
    y0 = np.asarray(pred_fn(x + n0)).astype(np.intp).reshape(-1)
    return yp, y0


def certify(net, x, noise: NoiseSpec, seed: int = 0, workers: int = 1, label_count: int | None = None,
            variant=Variant.PAPER_LITERAL, instance_id: int | None = None) -> CertificationReport:
    """Certify one ``(n, T)`` series.

    ``net`` is a ``Network`` or any callable mapping a ``(B, n, T)`` batch to
    labels (then give ``label_count`` or it is inferred from the labels seen).
    Samples are drawn in fixed chunks of 500, chunk ``k`` seeded by
    ``(seed, k)``, so the result does not depend on ``workers``.

    The report's ``variant`` records which Gaussian divergence form the bound
    corresponds to; the numeric bound itself is the same for both.
    """
    variant = Variant(variant)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != noise.channels:
        raise ValueError(f"series shape {x.shape} does not match {noise.channels} noise channel(s)")
    pred_fn, K = _predictor(net, label_count)
    MAX = noise.sample_count
    spans = [(k, min(CHUNK, MAX - k * CHUNK)) for k in range((MAX + CHUNK - 1) // CHUNK)]

    def run(span):
        return _count(pred_fn, x, noise, seed, span[0], span[1], K)

    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, spans))
    else:
        parts = [run(s) for s in spans]
    yp = np.concatenate([p[0] for p in parts])
    y0 = np.concatenate([p[1] for p in parts])
    if K is None:
        K = int(max(yp.max(), y0.max())) + 1
    if yp.min() < 0 or y0.min() < 0 or max(yp.max(), y0.max()) >= K:
        raise ValueError("predictor returned labels outside [0, label_count)")
    cP = np.bincount(yp, minlength=K)
    c0 = np.bincount(y0, minlength=K)
    EP, E0 = cP / MAX, c0 / MAX
    y_hat = int(np.argmax(EP))
    common = dict(EP=EP, E0=E0, samples_used=MAX, variant=variant.value, counts_P=cP, counts_0=c0,
                  instance_id=instance_id)
    if y_hat != int(np.argmax(E0)):
        return CertificationReport(Verdict.DECLINED, y_hat, 0.0, alpha_star=None, **common)
    if cP[y_hat] == MAX:
        return CertificationReport(Verdict.CERTIFIED_TRIVIALLY, y_hat, float(np.max(np.abs(noise.mu_P))),
                                   alpha_star=None, **common)
    top = np.sort(EP)[::-1]
    delta, a_star = theorem2_bound_alpha(float(top[0]), float(top[1]), noise.Sigma)
    return CertificationReport(Verdict.CERTIFIED, y_hat, delta, alpha_star=a_star, **common)


def certify_batch(net, X, noise: NoiseSpec, seed: int = 0, workers: int = 1, label_count=None,
                  variant=Variant.PAPER_LITERAL, instance_ids=None) -> list[CertificationReport]:
    """Certify every row of ``X``; instance ``i`` uses the seed ``(seed, id_i)``."""
    X = np.asarray(X, dtype=np.float64)
    ids = np.arange(len(X)) if instance_ids is None else np.asarray(instance_ids)

    def one(i):
        return certify(net, X[i], noise, seed=_mix(seed, int(ids[i])), label_count=label_count,
                       variant=variant, instance_id=int(ids[i]))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, range(len(X))))
    return [one(i) for i in range(len(X))]


def _mix(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def certification_curve(reports, y_true, deltas) -> np.ndarray:
    """Fraction of instances certified with ``delta >= d`` and correctly predicted, per ``d``.

    Returns an array of shape ``(len(deltas), 2)`` with columns ``(d, fraction)``.
    """
    reports = list(reports)
    y_true = np.asarray(y_true)
    if len(reports) != len(y_true):
        raise ValueError("reports and labels differ in length")
    ok = np.array([r.certified and r.predicted_label == y for r, y in zip(reports, y_true)], bool)
    dv = np.array([r.delta for r in reports])
    deltas = np.asarray(deltas, dtype=np.float64)
    frac = [float(np.mean(ok & (dv >= d))) if len(reports) else 0.0 for d in deltas]
    return np.column_stack([deltas, frac])


def write_cert_csv(reports, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "verdict", "delta", "predicted_label", "max_EP"])
        for i, r in enumerate(reports):
            rid = r.instance_id if r.instance_id is not None else i
            w.writerow([rid, r.verdict.value, repr(float(r.delta)), r.predicted_label, repr(float(r.EP.max()))])
    return path


# -- bound conversions ---------------------------------------------------------


def convert_bounds(delta: float, x, grid_points: int | None = None) -> dict:
    """Bounds on RMS, skewness and kurtosis implied by a mean-shift bound ``delta``.

    For each channel with population standard deviation ``sigma`` and central
    sums ``G(mu) = mean((x - mu)^3)``, ``K(mu) = mean((x - mu)^4)``:

    * ``rms_literal = delta^2 + sigma^2`` (a squared quantity) and
      ``rms_sqrt = sqrt(delta^2 + sigma^2)``;
    * ``skewness = max_{|mu| <= delta} |G(mu)| / sigma^3``.  ``G`` is monotone,
      so the max is attained at ``mu = +-delta``; ``skewness_literal`` is
      ``|G(delta)| / sigma^3``;
    * ``kurtosis = max_{|mu| <= delta} K(mu) / sigma^4 - 3``, also attained at an
      endpoint because ``K`` is convex; ``kurtosis_literal`` is ``|K(delta)| / sigma^4 - 3``.

    Each entry holds per-channel values under ``"per_channel"`` and their
    maximum (the inf-norm bound) at the top level.  With ``grid_points`` the
    endpoint maxima are replaced by a brute-force search over that many
    evenly spaced ``mu`` values, which is mainly useful for checking.
    """
    if delta < 0 or not np.isfinite(delta):
        raise ValueError("delta must be finite and nonnegative")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mu = x.mean(axis=-1)
    sigma = x.std(axis=-1)
    if np.any(sigma <= 1e-12 * np.maximum(1.0, np.abs(mu))):
        raise DegenerateChannelError("channel with zero standard deviation")

    def G(m):
        return ((x - m[..., None]) ** 3).mean(axis=-1) if np.ndim(m) else ((x - m) ** 3).mean(axis=-1)

    def K(m):
        return ((x - m[..., None]) ** 4).mean(axis=-1) if np.ndim(m) else ((x - m) ** 4).mean(axis=-1)

    if grid_points:
        mus = np.linspace(-delta, delta, grid_points)
        dev = x[None] - mus[:, None, None]
        g_max = np.abs((dev ** 3).mean(axis=-1)).max(axis=0)
        k_max = (dev ** 4).mean(axis=-1).max(axis=0)
    else:
        g_max = np.maximum(np.abs(G(-delta)), np.abs(G(delta)))
        k_max = np.maximum(K(-delta), K(delta))
    per = {
        "rms_literal": delta ** 2 + sigma ** 2,
        "rms_sqrt": np.sqrt(delta ** 2 + sigma ** 2),
        "skewness": g_max / sigma ** 3,
        "skewness_literal": np.abs(G(delta)) / sigma ** 3,
        "kurtosis": k_max / sigma ** 4 - 3.0,
        "kurtosis_literal": np.abs(K(delta)) / sigma ** 4 - 3.0,
    }
    out = {k: float(np.max(v)) for k, v in per.items()}
    out["per_channel"] = {k: v.tolist() for k, v in per.items()}
    out["delta"] = float(delta)
    out["rms_note"] = "rms_literal is delta^2 + sigma^2 (squared units); rms_sqrt is its square root"
    return out


def gen_spd_covariance(n: int, sigma: float, seed=0, diagonal: bool = False) -> np.ndarray:
    """Random PSD ``n x n`` matrix with every diagonal entry equal to ``sigma``.

    Built as ``A A'`` from a seeded Gaussian ``A``, rescaled to a correlation
    matrix and multiplied by ``sigma``.  ``diagonal=True`` gives ``sigma * I``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if diagonal or n == 1:
        return sigma * np.eye(n)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    S = A @ A.T
    d = np.sqrt(np.diag(S))
    C = S / np.outer(d, d)
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 1.0)
    return sigma * C
