"""Statistically-constrained polynomial-transformation attacks and baselines.

The attack loss for a transform ``PT`` and input ``x`` is::

    beta_label * max(max_{y != t} Z_y(PT(x)) - Z_t(PT(x)), rho)
        + beta_stat * sum_i ||S_i(PT(x)) - S_i(x)||

where ``Z`` are the classifier logits, ``t`` the target class and ``S_i`` the
configured statistical features.  Coefficients are optimized by plain
gradient descent.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .features import SKEW_POOL, compute_feature, parse_features, stat_loss_node
from .models import Network, train
from .transform import PolyTransform, TransformBundle, apply, identity_init, poly_node, random_init

__all__ = [
    "AttackConfig",
    "AttackResult",
    "AttackDivergedError",
    "label_loss_node",
    "label_loss",
    "combined_loss",
    "loss_and_grad",
    "instance_attack",
    "instance_attack_batch",
    "attack_many",
    "universal_attack",
    "universal_fooling_rate",
    "fgs_attack",
    "pgd_attack",
    "alpha_eff",
    "make_augmentation",
    "adversarial_train",
    "write_results_jsonl",
    "read_results_jsonl",
]

log = logging.getLogger(__name__)


class AttackDivergedError(ad.NumericalError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    target_class: int | None = None
    rho: float = -20.0
    beta_label: float = 1.0
    beta_stat: float = 1.0
    degree: int = 2
    features: tuple = SKEW_POOL
    lr: float = 0.01
    max_iters: int = 5000
    loss_threshold: float = 0.1
    norm: str = "linf"
    init_scale: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not self.rho < 0:
            raise ValueError(f"rho must be negative, got {self.rho}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 <= self.degree <= 3:
            raise ValueError("degree must be in 0..3")
        if self.norm.lower() not in ("linf", "l2"):
            raise ValueError(f"norm must be 'linf' or 'l2', got {self.norm!r}")
        object.__setattr__(self, "features", parse_features(self.features))
        object.__setattr__(self, "norm", self.norm.lower())

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["features"] = [f.value for f in self.features]
        return d


@dataclass
class AttackResult:
    transform: PolyTransform
    adversarial: np.ndarray
    final_loss: float
    iterations_used: int
    succeeded: bool
    stat_deviations: dict
    target_class: int
    original_prediction: int
    adversarial_prediction: int
    instance_id: int | None = None

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "target_class": self.target_class,
            "original_prediction": self.original_prediction,
            "adversarial_prediction": self.adversarial_prediction,
            "succeeded": self.succeeded,
            "final_loss": self.final_loss,
            "iterations_used": self.iterations_used,
            "stat_deviations": self.stat_deviations,
            "transform": self.transform.to_dict(),
        }


# -- losses -----------------------------------------------------------------


def label_loss_node(logits: ad.Node, targets, rho: float, label_count: int) -> ad.Node:
    """``max(max_{y != t} Z_y - Z_t, rho)`` per row of a ``(B, K)`` logits node."""
    if label_count < 2:
        raise ValueError("the label loss needs at least two classes")
    if not rho < 0:
        raise ValueError("rho must be negative")
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    others = np.array([[y for y in range(label_count) if y != t] for t in targets], dtype=np.intp)
    g = logits.graph
    z_t = ad.reshape(ad.take(logits, targets[:, None]), (len(targets),))
    z_o = ad.amax(ad.take(logits, others), axis=-1)
    return ad.maximum(z_o - z_t, g.constant(float(rho)))


class _AttackGraph:
    """Loss graph over a batch of inputs with per-instance coefficients.

    Inputs and reference features are leaves, so one graph serves any batch.
    """

    def __init__(self, net: Network, cfg: AttackConfig, targets_fixed=None):
        self.net = net
        self.cfg = cfg
        g = self.graph = ad.Graph()
        self.x = g.leaf("x", differentiable=False)
        self.names = [f"a{k}" for k in range(cfg.degree + 1)]
        coeffs = [g.leaf(n) for n in self.names]
        pt = poly_node(coeffs, self.x)
        self.ref = {f: g.leaf(f"ref_{f.value}", differentiable=False) for f in cfg.features}
        self.t_idx = g.leaf("t_idx", differentiable=False)
        self.o_idx = g.leaf("o_idx", differentiable=False)
        z = net.build(g, pt)
        z_t = ad.take(z, self.t_idx)
        z_o = ad.amax(ad.take(z, self.o_idx), axis=-1)
        label = ad.maximum(z_o - ad.sum(z_t, axis=-1), g.constant(float(cfg.rho)))
        stat = stat_loss_node(pt, self.ref, cfg.features, cfg.norm)
        per = cfg.beta_label * label + cfg.beta_stat * stat
        g.output("per", per)
        g.output("label", label)
        g.output("stat", stat)
        g.output("total", ad.sum(per))

    def bind(self, X, targets, refs, coeffs) -> dict:
        K = self.net.label_count
        targets = np.asarray(targets, dtype=np.intp)
        others = np.array([[y for y in range(K) if y != t] for t in targets], dtype=np.intp)
        feed = {"x": X, "t_idx": targets[:, None], "o_idx": others}
        feed.update({f"ref_{f.value}": refs[f] for f in self.cfg.features})
        feed.update(dict(zip(self.names, coeffs)))
        return feed

    def evaluate(self, feed, grad: bool):
        try:
            out = self.graph.forward(feed)
        except ad.NumericalError as exc:
            raise AttackDivergedError(f"attack loss is not finite: {exc}") from None
        if not grad:
            return out, None
        g = self.graph.gradient("total", self.names)
        return out, np.stack([g[n] for n in self.names])


def _check_net(net: Network):
    if net.label_count < 2:
        raise ValueError("the label loss needs at least two classes")


def _loss_parts(net, transform, x, cfg: AttackConfig, target: int, grad: bool):
    _check_net(net)
    x = np.asarray(x, dtype=np.float64)
    graph = _AttackGraph(net, replace(cfg, degree=transform.degree))
    refs = {f: compute_feature(x[None], f) for f in cfg.features}
    feed = graph.bind(x[None], [target], refs, transform.coeffs[:, None])
    out, g = graph.evaluate(feed, grad)
    return out, (None if g is None else g[:, 0])


def label_loss(net: Network, transform: PolyTransform, x, target: int, rho: float = -20.0) -> float:
    cfg = AttackConfig(rho=rho, degree=transform.degree)
    out, _ = _loss_parts(net, transform, x, cfg, target, grad=False)
    return float(out["label"][0])


def combined_loss(net: Network, transform: PolyTransform, x, cfg: AttackConfig, target: int | None = None) -> float:
    target = cfg.target_class if target is None else target
    out, _ = _loss_parts(net, transform, x, cfg, target, grad=False)
    return float(out["per"][0])


def loss_and_grad(net: Network, transform: PolyTransform, x, cfg: AttackConfig, target: int | None = None):
    """Combined loss and its gradient w.r.t. the stacked coefficients ``(d+1, n, T)``."""
    target = cfg.target_class if target is None else target
    out, g = _loss_parts(net, transform, x, cfg, target, grad=True)
    return float(out["per"][0]), g


# -- instance-specific attack ------------------------------------------------


def _deviations(x_adv, x, cfg: AttackConfig) -> dict:
    out = {}
    for f in cfg.features:
        d = compute_feature(x_adv, f) - compute_feature(x, f)
        out[f.value] = float(np.max(np.abs(d)) if cfg.norm == "linf" else np.sqrt(np.sum(d ** 2)))
    return out


def _finish(net, x, coeffs, loss, iters, target, pred, cfg, instance_id) -> AttackResult:
    t = PolyTransform(coeffs)
    adv = apply(t, x)
    adv_pred = int(net.predict(adv))
    return AttackResult(t, adv, float(loss), int(iters), bool(adv_pred == target), _deviations(adv, x, cfg),
                        int(target), int(pred), adv_pred, instance_id)


def instance_attack_batch(net: Network, X, targets, cfg: AttackConfig, instance_ids=None) -> list[AttackResult]:
    """Attack every row of ``X`` towards its own target, vectorized over the batch.

    Instance ``i`` starts from coefficients seeded by ``(cfg.seed, instance_ids[i])``
    so its trajectory does not depend on which other instances share the batch,
    up to rounding in batched matrix products.
    Each instance stops as soon as its loss drops below ``cfg.loss_threshold``;
    otherwise the lowest-loss coefficients seen within ``cfg.max_iters`` steps
    are returned.
    """
    _check_net(net)
    X = np.asarray(X, dtype=np.float64)
    B = len(X)
    targets = np.broadcast_to(np.asarray(targets, dtype=np.intp), (B,)).copy()
    if np.any((targets < 0) | (targets >= net.label_count)):
        raise ValueError("target class out of range")
    ids = np.arange(B) if instance_ids is None else np.asarray(instance_ids)
    preds = np.atleast_1d(net.predict(X)) if B else np.zeros(0, int)
    shape = X.shape[1:]
    results: list[AttackResult | None] = [None] * B

    graph = _AttackGraph(net, cfg)
    refs = {f: compute_feature(X, f) for f in cfg.features}

    ident = identity_init(shape, max(cfg.degree, 1)).coeffs[: cfg.degree + 1] if cfg.degree >= 1 else None
    active = []
    coeffs = []
    for i in range(B):
        if preds[i] == targets[i]:
            c = ident if ident is not None else np.zeros((1,) + shape)
            feed = graph.bind(X[i:i + 1], targets[i:i + 1], {f: v[i:i + 1] for f, v in refs.items()},
                              c[:, None])
            loss = graph.evaluate(feed, grad=False)[0]["per"][0]
            results[i] = _finish(net, X[i], c, loss, 0, targets[i], preds[i], cfg, _id(ids[i]))
            continue
        rng = np.random.default_rng([cfg.seed, int(ids[i])])
        if cfg.degree >= 1:
            c = random_init(shape, cfg.init_scale, cfg.degree, seed=rng).coeffs
        else:
            c = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(1,) + shape)
        active.append(i)
        coeffs.append(c)
    if not active:
        return results

    active = np.array(active)
    C = np.stack(coeffs, axis=1)  # (d+1, A, n, T)
    best_loss = np.full(B, np.inf)
    best_coeffs = {}
    it = 0
    while len(active):
        feed = graph.bind(X[active], targets[active], {f: v[active] for f, v in refs.items()}, C)
        last = it == cfg.max_iters
        out, grad = graph.evaluate(feed, grad=not last)
        per = out["per"]
        for j, i in enumerate(active):
            if per[j] < best_loss[i]:
                best_loss[i] = per[j]
                best_coeffs[i] = (C[:, j].copy(), it)
        done = (per < cfg.loss_threshold) | last
        for j in np.flatnonzero(done):
            i = active[j]
            c, at = (C[:, j], it) if per[j] < cfg.loss_threshold else best_coeffs[i]
            loss = per[j] if per[j] < cfg.loss_threshold else best_loss[i]
            results[i] = _finish(net, X[i], c.copy(), loss, it, targets[i], preds[i], cfg, _id(ids[i]))
        keep = ~done
        if last or not keep.any():
            break
        C = C[:, keep] - cfg.lr * grad[:, keep]
        active = active[keep]
        it += 1
    return results


def _id(v):
    return int(v) if v is not None else None


def instance_attack(net: Network, x, cfg: AttackConfig, target: int | None = None,
                    instance_id: int = 0) -> AttackResult:
    """Targeted attack on one ``(n, T)`` series (the batch routine with one row)."""
    target = cfg.target_class if target is None else target
    if target is None:
        raise ValueError("no target class given")
    return instance_attack_batch(net, np.asarray(x)[None], [target], cfg, [instance_id])[0]


def attack_many(net: Network, X, targets, cfg: AttackConfig, instance_ids=None, workers: int = 1,
                chunk: int = 32) -> list[AttackResult]:
    """Instance attacks over fixed-size chunks, optionally on a thread pool.

    Chunk boundaries do not depend on ``workers`` and each instance's seed
    depends only on its id, so serial and parallel runs agree.
    """
    X = np.asarray(X, dtype=np.float64)
    targets = np.broadcast_to(np.asarray(targets, dtype=np.intp), (len(X),))
    ids = np.arange(len(X)) if instance_ids is None else np.asarray(instance_ids)
    spans = [(s, min(s + chunk, len(X))) for s in range(0, len(X), chunk)]

    def run(span):
        s, e = span
        return instance_attack_batch(net, X[s:e], targets[s:e], cfg, ids[s:e])

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, spans))
    else:
        parts = [run(sp) for sp in spans]
    return [r for part in parts for r in part]


# -- universal attack -------------------------------------------------------


def universal_fooling_rate(net: Network, bundle: TransformBundle, X, exclude_target: bool = True) -> float:
    """Fraction of inputs sent to the bundle's target class.

    Each input is transformed with the coefficients of its clean prediction.
    With ``exclude_target`` inputs already predicted as the target are skipped.
    """
    X = np.asarray(X, dtype=np.float64)
    preds = np.atleast_1d(net.predict(X))
    keep = preds != bundle.target_class if exclude_target else np.ones(len(X), bool)
    if not keep.any():
        return 1.0
    adv = np.stack([bundle.apply(x, int(p)) for x, p in zip(X[keep], preds[keep])])
    return float(np.mean(np.atleast_1d(net.predict(adv)) == bundle.target_class))


def universal_attack(net: Network, X, target: int, cfg: AttackConfig, e_t: float = 0.1,
                     max_epochs: int = 20, history: list | None = None) -> TransformBundle:
    """Per-source-class transforms pushing inputs to ``target``.

    Sweeps the inputs in order; for every input not already classified as
    ``target`` one gradient step is applied to the coefficients of its
    predicted class.  Sweeps repeat until the empirical fooling rate on ``X``
    reaches ``1 - e_t`` or ``max_epochs`` passes are done.
    """
    _check_net(net)
    if cfg.degree < 1:
        raise ValueError("the universal attack needs degree >= 1")
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("no inputs")
    shape = X.shape[1:]
    preds = np.atleast_1d(net.predict(X))
    sources = sorted(set(int(p) for p in preds if p != target))
    coeffs = {}
    for y in range(net.label_count):
        if y in sources:
            rng = np.random.default_rng([cfg.seed, y])
            coeffs[y] = random_init(shape, cfg.init_scale, cfg.degree, seed=rng).coeffs.copy()
        else:
            coeffs[y] = identity_init(shape, cfg.degree).coeffs.copy()

    def bundle():
        return TransformBundle(target, {y: PolyTransform(c, y) for y, c in coeffs.items()})

    if not sources:
        return bundle()
    graph = _AttackGraph(net, cfg)
    refs = {f: compute_feature(X, f) for f in cfg.features}
    for epoch in range(max_epochs):
        for i in range(len(X)):
            y_hat = int(preds[i])
            if y_hat == target:
                continue
            feed = graph.bind(X[i:i + 1], [target], {f: v[i:i + 1] for f, v in refs.items()},
                              coeffs[y_hat][:, None])
            _, grad = graph.evaluate(feed, grad=True)
            coeffs[y_hat] = coeffs[y_hat] - cfg.lr * grad[:, 0]
        rate = universal_fooling_rate(net, bundle(), X)
        if history is not None:
            history.append({"epoch": epoch + 1, "fooling_rate": rate})
        log.debug("universal epoch %d fooling rate %.3f", epoch + 1, rate)
        if rate >= 1.0 - e_t:
            break
    return bundle()


# -- additive baselines -----------------------------------------------------


def _input_grad(net: Network, X, labels) -> np.ndarray:
    g = ad.Graph()
    x = g.leaf("x")
    g.output("loss", ad.sum(ad.softmax_cross_entropy(net.build(g, x), np.asarray(labels, np.intp))))
    g.forward({"x": X})
    return g.gradient("loss", "x")["x"]


def fgs_attack(net: Network, x, eps: float, label=None) -> np.ndarray:
    """``x + eps * sign(grad_x CE(F(x), label))``; ``label`` defaults to the prediction."""
    x = np.asarray(x, dtype=np.float64)
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    single = x.ndim == 2
    X = x[None] if single else x
    labels = np.atleast_1d(net.predict(X)) if label is None else np.broadcast_to(label, (len(X),))
    out = X + eps * np.sign(_input_grad(net, X, labels))
    return out[0] if single else out


def pgd_attack(net: Network, x, eps: float, steps: int = 10, step_size: float | None = None,
               label=None) -> np.ndarray:
    """Iterated signed-gradient steps projected onto the L-inf ball of radius ``eps``."""
    x = np.asarray(x, dtype=np.float64)
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    step_size = eps / 4 if step_size is None else step_size
    single = x.ndim == 2
    X0 = x[None] if single else x
    labels = np.atleast_1d(net.predict(X0)) if label is None else np.broadcast_to(label, (len(X0),))
    X = X0.copy()
    for _ in range(steps):
        X = X + step_size * np.sign(_input_grad(net, X, labels))
        X = np.clip(X, X0 - eps, X0 + eps)
    return X[0] if single else X


# -- evaluation and adversarial training -------------------------------------


def alpha_eff(results, net: Network | None = None) -> float:
    """Fraction of results classified as their target.

    With ``net`` the adversarial examples are re-scored on that network, which
    is how transfer (black-box) evaluation is done.
    """
    results = list(results)
    if not results:
        raise ValueError("no results")
    if net is None:
        return float(np.mean([r.succeeded for r in results]))
    adv = np.stack([r.adversarial for r in results])
    tgt = np.array([r.target_class for r in results])
    return float(np.mean(np.atleast_1d(net.predict(adv)) == tgt))


def _other_targets(preds, label_count, rng):
    return (preds + 1 + rng.integers(0, label_count - 1, size=len(preds))) % label_count


def make_augmentation(net: Network, X, y, kind: str, cfg: AttackConfig | None = None, eps: float = 0.1,
                      noise_sigma: float = 0.1, seed: int = 0, workers: int = 1):
    """Extra training examples (with the original labels) for adversarial training.

    ``kind`` is ``"tsastat"`` (targets drawn uniformly among the other classes),
    ``"fgs"``, ``"pgd"``, ``"gaussian"`` or ``"none"``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    rng = np.random.default_rng(seed)
    if kind == "none":
        return X[:0], y[:0]
    if kind == "tsastat":
        cfg = cfg or AttackConfig()
        preds = np.atleast_1d(net.predict(X))
        targets = _other_targets(preds, net.label_count, rng)
        results = attack_many(net, X, targets, cfg, workers=workers)
        return np.stack([r.adversarial for r in results]), y.copy()
    if kind == "fgs":
        return fgs_attack(net, X, eps, label=y), y.copy()
    if kind == "pgd":
        return pgd_attack(net, X, eps, steps=10, step_size=eps / 4, label=y), y.copy()
    if kind == "gaussian":
        return X + rng.normal(0.0, noise_sigma, size=X.shape), y.copy()
    raise ValueError(f"unknown augmentation kind {kind!r}")


def adversarial_train(net: Network, X, y, kind: str = "tsastat", cfg: AttackConfig | None = None,
                      epochs: int = 10, lr: float = 0.01, batch_size: int = 32, seed: int = 0,
                      X_test=None, y_test=None, augmentation=None, **aug_kwargs):
    """Retrain ``net`` on clean plus generated examples.

    ``augmentation`` may supply precomputed ``(X_aug, y_aug)``.  Returns
    ``(new_net, report)``; the report has the augmentation size, the training
    history and, when test data is given, clean test accuracy before/after.
    """
    from .models import accuracy

    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if augmentation is None:
        augmentation = make_augmentation(net, X, y, kind, cfg, seed=seed, **aug_kwargs)
    X_aug, y_aug = augmentation
    X_all = np.concatenate([X, X_aug]) if len(X_aug) else X
    y_all = np.concatenate([y, y_aug]) if len(y_aug) else y
    new_net, history = train(net, X_all, y_all, epochs=epochs, batch_size=batch_size, lr=lr, seed=seed)
    report = {"kind": kind, "augmented": int(len(X_aug)), "history": history}
    if X_test is not None:
        report["clean_acc_before"] = accuracy(net, X_test, y_test)
        report["clean_acc_after"] = accuracy(new_net, X_test, y_test)
        report["clean_acc_delta"] = report["clean_acc_after"] - report["clean_acc_before"]
    return new_net, report


# -- export -----------------------------------------------------------------


def write_results_jsonl(results, path) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_results_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
