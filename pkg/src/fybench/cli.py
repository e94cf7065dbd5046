"""Command-line driver.

Subcommands: map, loss, jacobian, biasvar, train, bench, calibration.

Experiment subcommands read an optional JSON config (``--config``); flags
given on the command line override config keys, which override defaults.
Every experiment writes ``manifest.json`` (config, its SHA-256, seed and
library versions) next to its outputs. Exit codes: 0 success, 1 runtime
failure, 2 usage or configuration error.
"""

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
import pydantic
import scipy
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import __version__
from .approx import ProposalDist, build_huffman
from .datasets import k_core_filter, load_tsv, split_per_user, synth_planted
from .divergences import SCHEMES, delta_report, empirical_report
from .errors import ConfigError, DomainError, UsageError
from .fy_losses import exact_loss, rankmax_loss
from .oracles import check_topk_calibration
from .simplex_maps import (MappingKind, classify_order_preservation, jacobian, predict,
                           spectral_norm)
from .trainer import (LOSSES, MFModel, TrainConfig, complexity_profile, save_checkpoint,
                      train, train_rg_als, write_epoch_csv)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(_Strict):
    source: Literal["synthetic", "tsv"] = "synthetic"
    path: Optional[str] = None
    threshold: float = 3.0
    k_core: int = 0
    n_users: int = Field(500, ge=1)
    n_items: int = Field(200, ge=2)
    d_true: int = Field(8, ge=1)
    temperature: float = Field(5.0, ge=0)
    interactions_per_user: int = Field(30, ge=1)


class TrainSection(_Strict):
    loss: str = "softmax"
    backbone: str = "mf"
    solver: Literal["gd", "als"] = "gd"
    d: int = Field(8, ge=1)
    learning_rate: float = Field(20.0, gt=0)
    l2: float = Field(5e-4, ge=0)
    epochs: int = Field(15, ge=1)
    batch_size: int = Field(256, ge=1)
    k: int = Field(10, ge=1)
    proposal: str = "uniform"
    alpha: float = 1.5
    optimizer: Literal["gd", "adam"] = "gd"
    dns_pool: int = Field(12, ge=1)
    cutoffs: List[int] = [10, 20]

    @model_validator(mode="after")
    def _coupling(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.backbone != "mf":
            raise ValueError(f"backbone {self.backbone!r} is not available; "
                             + ("hsm binds node factors to the MF backbone"
                                if self.loss == "hsm" else "only 'mf' is implemented"))
        if self.solver == "als" and self.loss != "rg":
            raise ValueError("the als solver applies to the rg loss only")
        return self


class SweepSection(_Strict):
    lr: List[float] = [1.0, 5.0, 20.0]
    k: List[int] = [5, 10, 50, 100]
    q: List[str] = ["uniform", "loguniform", "empirical", "dns"]


class BiasVarSection(_Strict):
    schemes: List[str] = ["ssm", "nce"]
    k: List[int] = [5, 10, 50, 100]
    q: List[Literal["uniform", "loguniform", "mixture"]] = ["uniform", "mixture"]
    norms: List[float] = [1.0]
    C: int = Field(20, ge=2)
    trials: int = Field(100_000, ge=100)

    @model_validator(mode="after")
    def _schemes(self):
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ValueError(f"unknown schemes {bad}")
        return self


class BenchSection(_Strict):
    losses: List[str] = ["softmax", "sparsemax", "ssm", "nce", "hsm"]
    C: List[int] = [256, 512, 1024, 2048, 4096, 8192]
    N: int = Field(8192, ge=1)
    k: int = Field(10, ge=1)
    d: int = Field(16, ge=1)
    batch_size: int = Field(512, ge=1)
    repeats: int = Field(3, ge=3)


class CalibrationSection(_Strict):
    C: int = Field(6, ge=2, le=12)
    trials: int = Field(1000, ge=1)
    order_trials: int = Field(10_000, ge=1)
    alpha: float = 1.5
    gradient_examples: int = Field(32, ge=1)


class ExperimentConfig(_Strict):
    seed: int = 0
    output_dir: str = "fybench_out"
    dataset: DatasetConfig = DatasetConfig()
    train: TrainSection = TrainSection()
    sweep: SweepSection = SweepSection()
    biasvar: BiasVarSection = BiasVarSection()
    bench: BenchSection = BenchSection()
    calibration: CalibrationSection = CalibrationSection()


# Helpers.

def _parse_vector(text):
    try:
        return np.array([float(x) for x in text.replace(";", ",").split(",") if x.strip()])
    except ValueError:
        raise UsageError(f"cannot parse {text!r} as comma-separated numbers") from None


def _score_rows(args):
    if (args.scores is None) == (args.scores_file is None):
        raise UsageError("give exactly one of --scores or --scores-file")
    if args.scores is not None:
        return [_parse_vector(args.scores)]
    lines = Path(args.scores_file).read_text().splitlines()
    return [_parse_vector(ln) for ln in lines if ln.strip()]


def _mapping(args):
    if args.mapping == "rankmax" and args.true_class is None:
        raise UsageError("--mapping rankmax needs --true-class")
    if args.mapping != "entmax" and args.alpha is not None:
        raise UsageError("--alpha applies to entmax only")
    try:
        if args.mapping == "entmax":
            return MappingKind.entmax(1.5 if args.alpha is None else args.alpha)
        if args.mapping == "rankmax":
            return MappingKind.rankmax(args.true_class)
        return MappingKind(args.mapping)
    except DomainError as err:
        raise UsageError(str(err)) from None


def _fmt(v):
    return ",".join(f"{x:.6f}" for x in np.asarray(v).ravel())


def _canonical(cfg):
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def _write_manifest(out, cfg, command):
    text = _canonical(cfg)
    manifest = {
        "command": command,
        "config": json.loads(text),
        "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
        "seed": cfg.seed,
        "versions": {"fybench": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _workers():
    raw = os.environ.get("FYBENCH_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FYBENCH_THREADS={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError("FYBENCH_THREADS must be >= 1")
    return n


def _pool_map(fn, jobs):
    """Ordered map over independent jobs, in a process pool when allowed."""
    n = min(_workers(), len(jobs))
    if n <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, jobs))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _num(x):
    return repr(float(x))


def load_config(args):
    """Defaults, then the JSON config file, then command-line overrides."""
    doc = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from None
    for key, path in _OVERRIDES.items():
        value = getattr(args, key, None)
        if value is None:
            continue
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    if getattr(args, "dataset_path", None):
        doc["dataset"]["source"] = "tsv"
    try:
        return ExperimentConfig.model_validate(doc)
    except pydantic.ValidationError as err:
        raise ConfigError(str(err)) from None


_OVERRIDES = {
    "seed": ("seed",),
    "output_dir": ("output_dir",),
    "loss": ("train", "loss"),
    "backbone": ("train", "backbone"),
    "solver": ("train", "solver"),
    "lr": ("train", "learning_rate"),
    "l2": ("train", "l2"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "k": ("train", "k"),
    "proposal": ("train", "proposal"),
    "dataset_path": ("dataset", "path"),
    "trials": ("biasvar", "trials"),
}


# Direct access subcommands.

def cmd_map(args):
    mapping = _mapping(args)
    for s in _score_rows(args):
        print(_fmt(predict(s, mapping)))
    return 0


def cmd_loss(args):
    mapping = _mapping(args)
    for s in _score_rows(args):
        if mapping.name == "rankmax":
            ev = rankmax_loss(s, mapping.true_class)
        elif args.label is None:
            raise UsageError("--label is required")
        else:
            ev = exact_loss(s, args.label, mapping)
        print(f"loss={ev.value:.6f}")
        print(f"grad={_fmt(ev.gradient)}")
    return 0


def cmd_jacobian(args):
    mapping = _mapping(args)
    for s in _score_rows(args):
        J = jacobian(s, mapping)
        for row in J.entries:
            print(_fmt(row))
        if args.spectral:
            print(f"spectral_norm={spectral_norm(J.entries):.6f}")
    return 0


# Experiments.

def _profile(C, norm, seed):
    g = np.random.default_rng([7, seed, C]).standard_normal(C)
    return norm * g / np.linalg.norm(g)


def _proposal(name, s):
    C = s.size
    if name == "uniform":
        return ProposalDist.uniform(C)
    if name == "loguniform":
        return ProposalDist.log_uniform(C)
    # equal mixture of the target softmax and uniform
    p = np.exp(s - s.max())
    return ProposalDist("empirical", 0.5 * p / p.sum() + 0.5 / C)


BIASVAR_HEADER = ["scheme", "k", "proposal", "norm", "C", "bias_analytic",
                  "bias_asymptotic", "bias_curvature", "variance_analytic",
                  "bias_empirical", "variance_empirical", "std_error", "trials"]


def _biasvar_row(job):
    scheme, k, qname, norm, C, trials, seed = job
    s = _profile(C, norm, seed)
    y = int(np.argmax(s))
    tree = node_logits = Q = None
    if scheme == "hsm":
        tree = build_huffman(np.ones(C))
        node_logits = _profile(C - 1, norm, seed + 1)
    elif scheme != "rg":
        Q = _proposal(qname, s)
    d = delta_report(scheme, s, y, Q, k, tree, node_logits)
    e = empirical_report(scheme, s, y, Q, k, trials, seed, tree, node_logits)
    return [scheme, k, qname, _num(norm), C, _num(d.bias), _num(d.bias_asymptotic),
            _num(d.bias_curvature), _num(d.variance), _num(e.bias_hat),
            _num(e.variance_hat), _num(e.std_error), trials]


def cmd_biasvar(args):
    cfg = load_config(args)
    bv = cfg.biasvar
    jobs = []
    for norm in bv.norms:
        for scheme in bv.schemes:
            if scheme in ("hsm", "rg"):
                jobs.append((scheme, 0, "none", norm, bv.C, bv.trials, cfg.seed))
                continue
            for qname in bv.q:
                for k in bv.k:
                    jobs.append((scheme, k, qname, norm, bv.C, bv.trials, cfg.seed))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "biasvar.csv", BIASVAR_HEADER, _pool_map(_biasvar_row, jobs))
    _write_manifest(out, cfg, "biasvar")
    print(out / "biasvar.csv")
    return 0


def build_dataset(cfg):
    ds = cfg.dataset
    if ds.source == "tsv":
        if not ds.path:
            raise ConfigError("dataset.path is required for tsv data")
        data = load_tsv(ds.path, ds.threshold)
        if ds.k_core:
            data = k_core_filter(data, ds.k_core)
    else:
        data, _ = synth_planted(ds.n_users, ds.n_items, ds.d_true, ds.temperature,
                                ds.interactions_per_user, cfg.seed)
    return split_per_user(data, seed=cfg.seed)


def _train_point(job):
    cfg, tag, overrides = job
    t = cfg.train
    fields = dict(loss=t.loss, learning_rate=t.learning_rate, l2=t.l2, epochs=t.epochs,
                  batch_size=t.batch_size, k=t.k, proposal=t.proposal, seed=cfg.seed,
                  cutoffs=tuple(t.cutoffs), alpha=t.alpha, optimizer=t.optimizer,
                  dns_pool=max(t.dns_pool, t.k))
    fields.update(overrides)
    if fields["proposal"] == "dns":
        fields["dns_pool"] = max(fields["dns_pool"], fields["k"])
    tcfg = TrainConfig(**fields)
    data = build_dataset(cfg)
    model = MFModel.init(data.n_users, data.n_items, t.d, cfg.seed)
    run = train_rg_als if t.solver == "als" else train
    model, records = run(model, data, tcfg)
    out = Path(cfg.output_dir)
    write_epoch_csv(records, out / f"{tag}.csv")
    save_checkpoint(model, out / f"{tag}.ckpt", cfg.seed)
    last = records[-1]
    if last.diverged:
        return f"{tag}: DIVERGED at epoch {last.epoch}"
    summary = " ".join(f"{name}@{k}={v:.4f}" for k, name, v in last.metrics.rows()
                       if name in ("ndcg", "recall")) if last.metrics else ""
    return f"{tag}: epoch {last.epoch} loss={last.train_loss:.6f} {summary}"


_SWEEP_KEYS = {"lr": "learning_rate", "k": "k", "q": "proposal"}


def cmd_train(args):
    cfg = load_config(args)
    # fail on an invalid training setup before any data is touched
    TrainConfig(loss=cfg.train.loss, learning_rate=cfg.train.learning_rate,
                l2=cfg.train.l2, proposal=cfg.train.proposal, alpha=cfg.train.alpha)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.sweep:
        values = getattr(cfg.sweep, args.sweep)
        key = _SWEEP_KEYS[args.sweep]
        jobs = [(cfg, f"train_{args.sweep}-{v}", {key: v}) for v in values]
    else:
        jobs = [(cfg, "train", {})]
    for line in _pool_map(_train_point, jobs):
        print(line)
    _write_manifest(out, cfg, "train" + (f" --sweep {args.sweep}" if args.sweep else ""))
    return 0


def cmd_bench(args):
    cfg = load_config(args)
    b = cfg.bench
    for loss in b.losses:
        if loss not in LOSSES:
            raise ConfigError(f"unknown loss {loss!r}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, timing = [], []
    # Timed runs stay sequential so they do not compete for cores.
    for loss in b.losses:
        prof = complexity_profile(loss, b.C, b.N, b.k, b.d, b.batch_size, b.repeats, cfg.seed)
        for C, t, ev in zip(prof.C_values, prof.median_time_s, prof.score_evals):
            rows.append([loss, C, ev, _num(prof.slope_evals)])
            timing.append([loss, C, _num(t), _num(prof.slope_time)])
        # Wall times vary run to run, so they go to bench_timing.csv only.
        print(f"{loss}: score_evals slope {prof.slope_evals:.3f}")
    _write_csv(out / "bench.csv", ["loss", "C", "score_evals", "fitted_slope_evals"], rows)
    _write_csv(out / "bench_timing.csv", ["loss", "C", "median_time_s", "fitted_slope"], timing)
    _write_manifest(out, cfg, "bench")
    return 0


def _mappings(alpha):
    return [MappingKind.softmax(), MappingKind.sparsemax(), MappingKind.entmax(alpha),
            MappingKind.rankmax(0)]


def cmd_calibration(args):
    cfg = load_config(args)
    c = cfg.calibration
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {"calibration": [], "order_probes": []}
    rng = np.random.default_rng([8, cfg.seed])
    grad_rows = []
    for m in _mappings(c.alpha):
        v = check_topk_calibration(m, c.C, range(1, c.C + 1), c.trials, cfg.seed)
        report["calibration"].append(v.to_dict())
        o = classify_order_preservation(m, c.order_trials, cfg.seed, n_classes=c.C)
        report["order_probes"].append({"mapping": str(m), "trials": o.trials,
                                       "verdict": o.verdict,
                                       "tie_witness": o.tie_witness is not None,
                                       "inversion": o.inversion_witness is not None})
        for i in range(c.gradient_examples):
            s = 2.0 * rng.standard_normal(c.C)
            y = int(rng.integers(c.C))
            p = predict(s, m.with_true_class(y) if m.name == "rankmax" else m)
            g = p.copy()
            g[y] -= 1.0
            grad_rows.append([str(m), i, y] + [_num(x) for x in g])
    report["gradient_dump"] = "gradients.csv"
    (out / "calibration.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_csv(out / "gradients.csv", ["mapping", "example", "label"]
               + [f"g{j}" for j in range(c.C)], grad_rows)
    _write_manifest(out, cfg, "calibration")
    ok = all(v["violations"] == 0 for v in report["calibration"])
    print(f"calibration {'ok' if ok else 'FAILED'}: {out / 'calibration.json'}")
    return 0 if ok else 1


# Argument parsing.

def _add_scores(p):
    p.add_argument("--mapping", required=True,
                   choices=["softmax", "sparsemax", "entmax", "rankmax"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--true-class", type=int)
    p.add_argument("--scores", help="comma-separated logits; use --scores=-1,2 for a leading minus")
    p.add_argument("--scores-file", help="one comma-separated logit vector per line")


def _add_experiment(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", dest="output_dir")


def build_parser():
    parser = argparse.ArgumentParser(prog="fybench", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("map", help="apply a prediction mapping")
    _add_scores(p)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("loss", help="loss value and gradient")
    _add_scores(p)
    p.add_argument("--label", type=int)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("jacobian", help="Jacobian of a mapping")
    _add_scores(p)
    p.add_argument("--spectral", action="store_true", help="also print the spectral norm")
    p.set_defaults(func=cmd_jacobian)

    p = sub.add_parser("biasvar", help="bias/variance table of the log-partition surrogates")
    _add_experiment(p)
    p.add_argument("--trials", type=int)
    p.set_defaults(func=cmd_biasvar)

    p = sub.add_parser("train", help="train matrix factorization")
    _add_experiment(p)
    p.add_argument("--loss")
    p.add_argument("--backbone")
    p.add_argument("--solver", choices=["gd", "als"])
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--proposal")
    p.add_argument("--data", dest="dataset_path")
    p.add_argument("--sweep", choices=sorted(_SWEEP_KEYS))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="per-epoch cost versus number of classes")
    _add_experiment(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("calibration", help="top-k calibration and order probes")
    _add_experiment(p)
    p.set_defaults(func=cmd_calibration)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"fybench: error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # runtime failure
        print(f"fybench: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
