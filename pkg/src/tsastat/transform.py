"""Polynomial input transformations ``x -> sum_k a_k * x**k`` (elementwise)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = [
    "PolyTransform",
    "TransformBundle",
    "FORMAT",
    "apply",
    "identity_init",
    "random_init",
    "poly_node",
    "theorem1_witness",
    "InfeasibleWitnessError",
]

FORMAT = "tsastat-pt-v1"
MAX_DEGREE = 3


class InfeasibleWitnessError(ValueError):
    pass


@dataclass(frozen=True)
class PolyTransform:
    """Coefficients ``a_0..a_d`` stacked into one ``(d+1, n, T)`` array."""

    coeffs: np.ndarray
    source_class: int | None = None

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.float64)
        if c.ndim != 3:
            raise ValueError(f"coeffs must have shape (d+1, n, T), got {c.shape}")
        if c.shape[0] - 1 > MAX_DEGREE:
            raise ValueError(f"degree {c.shape[0] - 1} exceeds the supported maximum {MAX_DEGREE}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self) -> int:
        return self.coeffs.shape[0] - 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.coeffs.shape[1:]

    def __call__(self, x):
        return apply(self, x)

    def __add__(self, other: "PolyTransform") -> "PolyTransform":
        return PolyTransform(self.coeffs + other.coeffs, self.source_class)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "degree": self.degree,
            "shape": list(self.shape),
            "coeffs": [a.ravel().tolist() for a in self.coeffs],
            "source_class": self.source_class,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolyTransform":
        if d.get("format") != FORMAT:
            raise ValueError(f"unsupported transform format {d.get('format')!r}")
        shape = tuple(d["shape"])
        coeffs = np.array([np.reshape(a, shape) for a in d["coeffs"]], dtype=np.float64)
        if coeffs.shape[0] != d["degree"] + 1:
            raise ValueError("degree does not match the number of coefficient arrays")
        return cls(coeffs, d.get("source_class"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PolyTransform":
        return cls.from_dict(json.loads(text))


@dataclass
class TransformBundle:
    """One transform per source class, as produced by the universal attack."""

    target_class: int
    transforms: dict[int, PolyTransform] = field(default_factory=dict)

    def __getitem__(self, label: int) -> PolyTransform:
        return self.transforms[label]

    def __contains__(self, label) -> bool:
        return label in self.transforms

    def keys(self):
        return self.transforms.keys()

    def apply(self, x, source_class: int) -> np.ndarray:
        """Transform ``x`` with the coefficients of its (predicted) source class.

        Inputs whose class has no transform are returned unchanged.
        """
        if source_class not in self.transforms:
            return np.array(x, dtype=np.float64)
        return apply(self.transforms[source_class], x)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT + "-bundle",
            "target_class": self.target_class,
            "transforms": {str(k): t.to_dict() for k, t in sorted(self.transforms.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformBundle":
        return cls(int(d["target_class"]),
                   {int(k): PolyTransform.from_dict(v) for k, v in d["transforms"].items()})


def apply(t: PolyTransform, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != t.shape:
        raise ValueError(f"transform shape {t.shape} does not match input shape {x.shape}")
    out = t.coeffs[0] * np.ones_like(x)
    for k in range(1, t.degree + 1):
        out = out + t.coeffs[k] * x ** k
    return out


def identity_init(shape, degree: int = 2, source_class: int | None = None) -> PolyTransform:
    coeffs = np.zeros((degree + 1,) + tuple(shape))
    if degree < 1:
        raise ValueError("the identity needs degree >= 1")
    coeffs[1] = 1.0
    return PolyTransform(coeffs, source_class)


def random_init(shape, scale: float, degree: int = 2, seed=None,
                source_class: int | None = None) -> PolyTransform:
    """Identity plus uniform noise in ``[-scale, scale]`` on every coefficient."""
    if scale < 0:
        raise ValueError("scale must be nonnegative")
    base = identity_init(shape, degree, source_class)
    if scale == 0:
        return base
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise = rng.uniform(-scale, scale, size=base.coeffs.shape)
    return PolyTransform(base.coeffs + noise, source_class)


def poly_node(coeffs: list[ad.Node], x) -> ad.Node:
    """Graph node for ``sum_k coeffs[k] * x**k`` with one node per coefficient."""
    out = coeffs[0]
    for k, a in enumerate(coeffs[1:], start=1):
        xk = x if k == 1 else ad.elementwise_pow(x, k)
        out = out + a * xk
    return out


def theorem1_witness(x, eps: float, offset=None, min_abs: float = 1e-6):
    """Degree-1 transform with ``|a_0| > eps`` somewhere whose output stays eps-close to ``x``.

    ``a_0`` is set to ``2*eps`` and ``a_1`` solves ``a_0 + (a_1 - 1) x = offset``
    elementwise, so the input-dependent term cancels most of ``a_0``.
    Elements with ``|x| <= min_abs`` keep ``a_0 = 0, a_1 = 1``.

    Returns ``(transform, x_adv)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an (n, T) series, got shape {x.shape}")
    if not np.any(x.max(axis=1) > x.min(axis=1)):
        raise InfeasibleWitnessError("every channel is constant")
    usable = np.abs(x) > min_abs
    if not usable.any():
        raise InfeasibleWitnessError("no element is far enough from zero")
    offset = np.zeros_like(x) if offset is None else np.broadcast_to(np.asarray(offset, float), x.shape)
    if np.isfinite(eps) and np.any(np.abs(offset) > eps):
        raise ValueError("requested offsets exceed eps")
    big = 2.0 * eps if np.isfinite(eps) else 1.0
    a0 = np.where(usable, big, 0.0)
    a1 = np.where(usable, 1.0 + (offset - a0) / np.where(usable, x, 1.0), 1.0)
    t = PolyTransform(np.stack([a0, a1]))
    return t, apply(t, x)
