"""Command-line interface: ``tsastat {train,attack,certify,advtrain,report}``.

Every command resolves its configuration from flags, an optional flat
``key = value`` config file (``--config``), the ``TSASTAT_SEED`` environment
variable and built-in defaults, in that order of precedence.  The resolved
configuration is written to ``<out>/manifest.txt`` in the same format, so a
run can be repeated with ``--config <out>/manifest.txt``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import attacks as atk
from . import autodiff as ad
from . import certify as cert
from . import data as dio
from . import models
from .features import parse_features
from .transform import TransformBundle

log = logging.getLogger("tsastat")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt(typ):
    def conv(v):
        if v is None or str(v).strip().lower() in ("", "none"):
            return None
        return typ(v)
    return conv


# key -> (converter, default, help)
DATA_KEYS = {
    "dataset": (_opt(str), None, "label-first delimited file (tab or comma)"),
    "test_dataset": (_opt(str), None, "separate test file, read with the training label map"),
    "generate": (_opt(str), "cbf", "synthetic generator when no --dataset: cbf or sc"),
    "count_per_class": (int, 200, "generated instances per class"),
    "length": (_opt(int), None, "generated series length (generator default if unset)"),
    "channels": (int, 1, "rows per instance in delimited files"),
    "split": (str, "0.5,0,0.5", "train,val,test fractions"),
    "normalize": (_bool, True, "per-instance z-normalization"),
    "seed": (int, 0, "global seed (falls back to TSASTAT_SEED)"),
    "workers": (int, None, "worker threads (default: available CPUs)"),
}
TRAIN_KEYS = {
    "arch": (str, "A1", "architecture id: A0, A1 or A2"),
    "epochs": (int, 20, "training epochs"),
    "lr": (float, 0.01, "SGD learning rate"),
    "batch_size": (int, 32, "mini-batch size"),
}
ATTACK_KEYS = {
    "checkpoint": (_opt(str), None, "model checkpoint to attack"),
    "eval_checkpoint": (_opt(str), None, "second checkpoint scored on the same examples (black-box)"),
    "mode": (str, "instance", "instance, universal, fgs or pgd"),
    "target_class": (_opt(str), None, "target label; unset draws one of the other classes per input"),
    "count": (int, 100, "number of test instances"),
    "rho": (float, -20.0, "label-loss floor (negative)"),
    "degree": (int, 2, "polynomial degree"),
    "features": (str, "skew-pool", "statistical features (comma list, skew-pool or kurt-pool)"),
    "norm": (str, "linf", "norm over channels: linf or l2"),
    "eta": (float, 0.01, "gradient-descent step size"),
    "max_iters": (int, 5000, "iteration cap per instance"),
    "loss_threshold": (float, 0.1, "stop once the loss is below this"),
    "beta_label": (float, 1.0, "label-loss weight"),
    "beta_stat": (float, 1.0, "statistical-loss weight"),
    "init_scale": (float, 1e-3, "half-width of the uniform coefficient initialization"),
    "eps": (float, 0.1, "L-inf radius for fgs/pgd"),
    "e_t": (float, 0.1, "universal attack stops at fooling rate 1 - e_t"),
    "max_epochs": (int, 20, "universal attack passes"),
    "plot": (_bool, False, "also write an SVG chart"),
}
CERT_KEYS = {
    "checkpoint": (_opt(str), None, "model checkpoint to certify"),
    "count": (int, 100, "number of test instances"),
    "mu_p": (str, "0.1", "noise mean per channel (scalar or comma list)"),
    "sigma": (float, 0.1, "diagonal entry of the noise covariance"),
    "covariance": (str, "diag", "diag or random (random PSD with the given diagonal)"),
    "max_samples": (int, 5000, "Monte-Carlo samples per instance"),
    "independent_noise": (_bool, False, "draw shifted and centred noise independently"),
    "delta_max": (float, 2.0, "largest delta-hat on the accuracy curve"),
    "delta_steps": (int, 21, "points on the accuracy curve"),
    "plot": (_bool, False, "also write an SVG chart"),
}
ADV_KEYS = {
    **{k: v for k, v in ATTACK_KEYS.items() if k not in ("mode", "target_class", "eval_checkpoint", "e_t",
                                                        "max_epochs")},
    **{k: v for k, v in CERT_KEYS.items() if k != "checkpoint"},
    "kind": (str, "tsastat", "augmentation: tsastat, fgs, pgd, gaussian or none"),
    "compare_gaussian": (_bool, False, "add a Gaussian-augmentation comparison arm"),
    "noise_sigma": (float, 0.1, "standard deviation for Gaussian augmentation"),
    "epochs": (int, 10, "retraining epochs"),
    "lr": (float, 0.01, "SGD learning rate"),
    "batch_size": (int, 32, "mini-batch size"),
}
COMMANDS = {
    "train": {**DATA_KEYS, **TRAIN_KEYS},
    "attack": {**DATA_KEYS, **ATTACK_KEYS},
    "certify": {**DATA_KEYS, **CERT_KEYS},
    "advtrain": {**DATA_KEYS, **ADV_KEYS},
}
# documented flag names that differ from the config keys
FLAG_ALIASES = {"eta": ["--eta"], "mu_p": ["--mu-p"]}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tsastat", description="Statistically constrained time-series attacks and certification.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, keys in COMMANDS.items():
        sp = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help="flat key = value config file (a manifest works)")
        for key, (_, default, help_) in keys.items():
            flags = FLAG_ALIASES.get(key, ["--" + key.replace("_", "-")])
            sp.add_argument(*flags, dest=key, help=f"{help_} [default: {default}]")
    rp = sub.add_parser("report")
    rp.add_argument("run_dir", help="a run directory or a directory of run directories")
    return p


# -- config ---------------------------------------------------------------------


def read_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for i, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(command: str, flags: dict, env=None) -> dict:
    env = os.environ if env is None else env
    keys = COMMANDS[command]
    raw = {k: d for k, (_, d, _) in keys.items()}
    if "TSASTAT_SEED" in env:
        raw["seed"] = env["TSASTAT_SEED"]
    if flags.get("config"):
        file_cfg = read_config(flags["config"])
        cmd = file_cfg.pop("command", command)
        file_cfg.pop("version", None)
        file_cfg.pop("out", None)
        if cmd != command:
            raise UsageError(f"config is for command {cmd!r}, not {command!r}")
        unknown = sorted(set(file_cfg) - set(keys))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        raw.update(file_cfg)
    raw.update({k: v for k, v in flags.items() if k in keys})
    cfg = {}
    for k, (conv, _, _) in keys.items():
        try:
            cfg[k] = conv(raw[k]) if raw[k] is not None else None
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {k}: {raw[k]!r} ({exc})") from None
    if cfg.get("workers") is None:
        cfg["workers"] = os.cpu_count() or 1
    return cfg


def write_manifest(out: Path, command: str, cfg: dict, extra: dict | None = None) -> Path:
    lines = [f"command = {command}", f"version = {__version__}"]
    for k in sorted(cfg):
        v = cfg[k]
        lines.append(f"{k} = {'none' if v is None else v}")
    for k, v in sorted((extra or {}).items()):
        lines.append(f"# {k} = {v}")
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


# -- helpers ------------------------------------------------------------------------


def _dataset(cfg) -> dio.LabeledDataset:
    fractions = [float(f) for f in cfg["split"].split(",")]
    if len(fractions) != 3:
        raise UsageError("split needs three comma-separated fractions")
    if cfg["dataset"]:
        ds = dio.load_delimited(cfg["dataset"], channels=cfg["channels"])
    else:
        gen = {"cbf": dio.gen_cbf, "sc": dio.gen_synthetic_control}.get(cfg["generate"])
        if gen is None:
            raise UsageError(f"unknown generator {cfg['generate']!r}; choose cbf or sc")
        kw = {"T": cfg["length"]} if cfg["length"] else {}
        ds = gen(cfg["count_per_class"], seed=cfg["seed"], **kw)
    if cfg["normalize"]:
        ds = dio.znormalize(ds)
    ds = dio.split(ds, fractions, seed=cfg["seed"])
    if cfg["test_dataset"]:
        test = dio.load_delimited(cfg["test_dataset"], channels=cfg["channels"], label_map=ds.label_map)
        if cfg["normalize"]:
            test = dio.znormalize(test)
        train = ds.subset(ds.splits != "test")
        ds = dio.LabeledDataset(np.concatenate([train.X, test.X]), np.concatenate([train.y, test.y]), ds.name,
                                max(ds.class_count, test.class_count),
                                np.concatenate([train.splits, np.full(len(test), "test", dtype=object)]),
                                ds.label_map)
    return ds


def _test_subset(ds, count):
    X, y = ds.arrays("test")
    if len(X) == 0:
        raise UsageError("the test split is empty")
    return X[:count], y[:count]


def _checkpoint(path, ds=None):
    if not path:
        raise UsageError("--checkpoint is required")
    net = models.load_checkpoint(path)
    if ds is not None and tuple(net.input_shape) != tuple(ds.shape):
        raise UsageError(f"checkpoint expects inputs {net.input_shape}, dataset has {ds.shape}")
    return net


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _attack_config(cfg, target=None) -> atk.AttackConfig:
    return atk.AttackConfig(target_class=target, rho=cfg["rho"], beta_label=cfg["beta_label"],
                            beta_stat=cfg["beta_stat"], degree=cfg["degree"],
                            features=parse_features(cfg["features"]), lr=cfg["eta"], max_iters=cfg["max_iters"],
                            loss_threshold=cfg["loss_threshold"], norm=cfg["norm"], init_scale=cfg["init_scale"],
                            seed=cfg["seed"])


def _noise(cfg, n) -> cert.NoiseSpec:
    mu = np.array([float(v) for v in str(cfg["mu_p"]).split(",")])
    if len(mu) == 1:
        mu = np.full(n, mu[0])
    if len(mu) != n:
        raise UsageError(f"mu_p has {len(mu)} entries, data has {n} channel(s)")
    kind = cfg["covariance"]
    if kind not in ("diag", "random"):
        raise UsageError("covariance must be diag or random")
    Sigma = cert.gen_spd_covariance(n, cfg["sigma"], seed=cfg["seed"], diagonal=kind == "diag")
    return cert.NoiseSpec(mu, Sigma, cfg["max_samples"], not cfg["independent_noise"])


def _delta_grid(cfg):
    if cfg["delta_steps"] < 1 or cfg["delta_max"] < 0:
        raise UsageError("delta_steps must be >= 1 and delta_max >= 0")
    return np.round(np.linspace(0.0, cfg["delta_max"], cfg["delta_steps"]), 12)


def _svg(path: Path, draw) -> Path | None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib is not installed; skipping %s", path.name)
        return None
    plt.rcParams["svg.hashsalt"] = "tsastat"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    draw(ax)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


# -- commands ---------------------------------------------------------------------------


def cmd_train(cfg, out: Path) -> int:
    ds = _dataset(cfg)
    Xtr, ytr = ds.arrays("train")
    Xva, yva = ds.arrays("val")
    Xte, yte = ds.arrays("test")
    if len(Xtr) == 0:
        raise UsageError("the training split is empty")
    net = models.init_network(cfg["arch"], ds.shape, ds.class_count, seed=cfg["seed"])
    net.label_map = dict(ds.label_map)
    net, hist = models.train(net, Xtr, ytr, epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                             seed=cfg["seed"], X_val=Xva if len(Xva) else None, y_val=yva if len(yva) else None)
    models.save_checkpoint(net, out / "model.tsn")
    _write_csv(out / "metrics.csv", ["epoch", "loss", "train_acc", "val_acc"],
               [[h["epoch"], h["loss"], h["train_acc"], h["val_acc"]] for h in hist])
    test_acc = models.accuracy(net, Xte, yte) if len(Xte) else float("nan")
    _write_csv(out / "summary.csv", ["key", "value"],
               [["train_size", len(Xtr)], ["test_size", len(Xte)], ["test_accuracy", test_acc]])
    print(f"test accuracy {test_acc:.4f}; checkpoint {out / 'model.tsn'}")
    return EXIT_OK


def _targets(cfg, net, X):
    preds = np.atleast_1d(net.predict(X))
    if cfg["target_class"] is None:
        rng = np.random.default_rng([cfg["seed"], 1])
        return (preds + 1 + rng.integers(0, net.label_count - 1, size=len(X))) % net.label_count
    try:
        t = int(cfg["target_class"])
    except ValueError:
        raise UsageError(f"target_class must be an integer, got {cfg['target_class']!r}") from None
    if not 0 <= t < net.label_count:
        raise UsageError(f"target_class {t} outside 0..{net.label_count - 1}")
    return np.full(len(X), t)


def cmd_attack(cfg, out: Path) -> int:
    ds = _dataset(cfg)
    net = _checkpoint(cfg["checkpoint"], ds)
    other = _checkpoint(cfg["eval_checkpoint"], ds) if cfg["eval_checkpoint"] else None
    X, y = _test_subset(ds, cfg["count"])
    mode = cfg["mode"]
    if mode == "universal":
        return _attack_universal(cfg, out, net, other, ds, X)
    targets = _targets(cfg, net, X)
    if mode == "instance":
        results = atk.attack_many(net, X, targets, _attack_config(cfg), workers=cfg["workers"])
        atk.write_results_jsonl(results, out / "results.jsonl")
        adv = np.stack([r.adversarial for r in results])
    elif mode in ("fgs", "pgd"):
        # untargeted additive baselines: push away from the prediction, score against the target anyway
        fn = atk.fgs_attack if mode == "fgs" else atk.pgd_attack
        adv = fn(net, X, cfg["eps"])
        preds = np.atleast_1d(net.predict(adv))
        with open(out / "results.jsonl", "w") as fh:
            for i in range(len(X)):
                fh.write(json.dumps({"instance_id": i, "target_class": int(targets[i]),
                                     "adversarial_prediction": int(preds[i]),
                                     "succeeded": bool(preds[i] == targets[i]),
                                     "linf": float(np.abs(adv[i] - X[i]).max())}, sort_keys=True) + "\n")
    else:
        raise UsageError(f"unknown attack mode {mode!r}")
    rows = _alpha_rows(atk.read_results_jsonl(out / "results.jsonl"), adv, other)
    header = ["target_class", "count", "alpha_eff"] + (["alpha_eff_transfer"] if other else [])
    _write_csv(out / "summary.csv", header, rows)
    if cfg["plot"]:
        _svg(out / "alpha_eff.svg", lambda ax: (ax.bar([str(r[0]) for r in rows], [r[2] for r in rows]),
                                                 ax.set_xlabel("target class"), ax.set_ylabel("alpha_eff"),
                                                 ax.set_ylim(0, 1)))
    print(f"alpha_eff {rows[-1][2]:.4f} over {len(X)} instances")
    return EXIT_OK


def _alpha_rows(records, adv, other):
    tgt = np.array([r["target_class"] for r in records])
    ok = np.array([r["succeeded"] for r in records], bool)
    ok_b = np.atleast_1d(other.predict(adv)) == tgt if other is not None else None
    rows = []
    for t in sorted(set(tgt.tolist())) + ["all"]:
        m = np.ones(len(tgt), bool) if t == "all" else tgt == t
        row = [t, int(m.sum()), float(ok[m].mean())]
        if ok_b is not None:
            row.append(float(ok_b[m].mean()))
        rows.append(row)
    return rows


def _attack_universal(cfg, out, net, other, ds, X):
    if cfg["target_class"] is None:
        raise UsageError("the universal attack needs --target-class")
    t = int(cfg["target_class"])
    if not 0 <= t < net.label_count:
        raise UsageError(f"target_class {t} outside 0..{net.label_count - 1}")
    Xtr, _ = ds.arrays("train")
    history = []
    bundle = atk.universal_attack(net, Xtr, t, _attack_config(cfg, t), e_t=cfg["e_t"],
                                  max_epochs=cfg["max_epochs"], history=history)
    (out / "bundle.json").write_text(json.dumps(bundle.to_dict(), sort_keys=True) + "\n")
    _write_csv(out / "history.csv", ["epoch", "train_fooling_rate"],
               [[h["epoch"], h["fooling_rate"]] for h in history])
    rows = [["train", atk.universal_fooling_rate(net, bundle, Xtr)],
            ["test", atk.universal_fooling_rate(net, bundle, X)]]
    if other is not None:
        rows.append(["test_transfer", _transfer_rate(net, other, bundle, X)])
    _write_csv(out / "summary.csv", ["split", "fooling_rate"], rows)
    print(f"held-out fooling rate {rows[1][1]:.4f}")
    return EXIT_OK


def _transfer_rate(net, other, bundle: TransformBundle, X):
    preds = np.atleast_1d(net.predict(X))
    keep = preds != bundle.target_class
    if not keep.any():
        return 1.0
    adv = np.stack([bundle.apply(x, int(p)) for x, p in zip(X[keep], preds[keep])])
    return float(np.mean(np.atleast_1d(other.predict(adv)) == bundle.target_class))


def _certify_set(cfg, net, X, y, noise):
    reports = cert.certify_batch(net, X, noise, seed=cfg["seed"], workers=cfg["workers"])
    return reports, cert.certification_curve(reports, y, _delta_grid(cfg))


BOUND_KEYS = ["delta", "rms_literal", "rms_sqrt", "skewness", "skewness_literal", "kurtosis", "kurtosis_literal"]


def _bound_row(report, x):
    try:
        b = cert.convert_bounds(report.delta if np.isfinite(report.delta) else 0.0, x)
    except cert.DegenerateChannelError:
        return [report.instance_id] + [report.delta] + [float("nan")] * (len(BOUND_KEYS) - 1)
    return [report.instance_id] + [b[k] if k != "delta" else report.delta for k in BOUND_KEYS]


def cmd_certify(cfg, out: Path) -> int:
    ds = _dataset(cfg)
    net = _checkpoint(cfg["checkpoint"], ds)
    X, y = _test_subset(ds, cfg["count"])
    noise = _noise(cfg, ds.shape[0])
    reports, curve = _certify_set(cfg, net, X, y, noise)
    cert.write_cert_csv(reports, out / "cert.csv")
    _write_csv(out / "curve.csv", ["delta_hat", "accuracy"], curve.tolist())
    with open(out / "reports.jsonl", "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
    _write_csv(out / "bounds.csv", ["instance_id"] + BOUND_KEYS, [_bound_row(r, x) for r, x in zip(reports, X)])
    if cfg["plot"]:
        _svg(out / "curve.svg", lambda ax: (ax.plot(curve[:, 0], curve[:, 1]), ax.set_xlabel("delta_hat"),
                                           ax.set_ylabel("certified accuracy"), ax.set_ylim(0, 1)))
    print(f"certified accuracy at delta_hat=0: {curve[0, 1]:.4f}")
    return EXIT_OK


def cmd_advtrain(cfg, out: Path) -> int:
    ds = _dataset(cfg)
    net = _checkpoint(cfg["checkpoint"], ds)
    Xtr, ytr = ds.arrays("train")
    X, y = _test_subset(ds, cfg["count"])
    Xte_all, yte_all = ds.arrays("test")
    noise = _noise(cfg, ds.shape[0])
    arms = [("original", net)]
    kinds = [cfg["kind"]] + (["gaussian"] if cfg["compare_gaussian"] and cfg["kind"] != "gaussian" else [])
    extra = {"checkpoint_original": cfg["checkpoint"]}
    for kind in kinds:
        new, _ = atk.adversarial_train(net, Xtr, ytr, kind=kind, cfg=_attack_config(cfg), epochs=cfg["epochs"],
                                       lr=cfg["lr"], batch_size=cfg["batch_size"], seed=cfg["seed"],
                                       eps=cfg["eps"], noise_sigma=cfg["noise_sigma"], workers=cfg["workers"])
        path = out / f"model_{kind}.tsn"
        models.save_checkpoint(new, path)
        extra[f"checkpoint_{kind}"] = str(path)
        arms.append((kind, new))
    acc_rows, curves = [], []
    base = models.accuracy(net, Xte_all, yte_all)
    for name, m in arms:
        a = models.accuracy(m, Xte_all, yte_all)
        acc_rows.append([name, a, a - base])
        curves.append(_certify_set(cfg, m, X, y, noise)[1])
    _write_csv(out / "accuracy.csv", ["model", "clean_accuracy", "delta_vs_original"], acc_rows)
    grid = curves[0][:, 0]
    _write_csv(out / "curve.csv", ["delta_hat"] + [n for n, _ in arms],
               [[d] + [c[i, 1] for c in curves] for i, d in enumerate(grid)])
    write_manifest(out, "advtrain", cfg, extra)
    if cfg["plot"]:
        def draw(ax):
            for (n, _), c in zip(arms, curves):
                ax.plot(c[:, 0], c[:, 1], label=n)
            ax.set_xlabel("delta_hat")
            ax.set_ylabel("certified accuracy")
            ax.legend()
        _svg(out / "curve.svg", draw)
    for name, a, d in acc_rows:
        print(f"{name}: clean accuracy {a:.4f} ({d:+.4f})")
    return EXIT_OK


def cmd_report(run_dir) -> int:
    root = Path(run_dir)
    if not root.is_dir():
        raise UsageError(f"run directory not found: {root}")
    runs = [root] if (root / "manifest.txt").is_file() else sorted(
        p for p in root.iterdir() if (p / "manifest.txt").is_file())
    if not runs:
        raise UsageError(f"no runs (manifest.txt) under {root}")
    rows, md = [], ["# tsastat report", ""]
    for run in runs:
        manifest = read_config(run / "manifest.txt")
        name = run.name if run != root else "."
        md += [f"## {name} ({manifest.get('command', '?')})", ""]
        for table in sorted(run.glob("*.csv")):
            with open(table, newline="") as fh:
                data = list(csv.reader(fh))
            if not data:
                continue
            md += [f"### {table.name}", "", "| " + " | ".join(data[0]) + " |",
                   "|" + "---|" * len(data[0])]
            md += ["| " + " | ".join(r) + " |" for r in data[1:]]
            md.append("")
            for i, r in enumerate(data[1:]):
                for col, v in zip(data[0], r):
                    rows.append([name, table.name, i, col, v])
        if manifest.get("command") == "certify":
            md += ["RMS bounds derived from a certified delta are reported twice: delta^2 + sigma^2 as"
                   " printed (a squared quantity) and its square root.", ""]
    (root / "report.md").write_text("\n".join(md) + "\n")
    _write_csv(root / "report_tables.csv", ["run", "table", "row", "column", "value"], rows)
    print(f"wrote {root / 'report.md'}")
    return EXIT_OK


COMMAND_FNS = {"train": cmd_train, "attack": cmd_attack, "certify": cmd_certify, "advtrain": cmd_advtrain}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.run_dir)
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
        cfg = resolve(args.command, flags)
        out = Path(flags["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, args.command, cfg)
        return COMMAND_FNS[args.command](cfg, out)
    except (ad.NumericalError, FloatingPointError) as exc:
        print(f"tsastat: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"tsastat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
