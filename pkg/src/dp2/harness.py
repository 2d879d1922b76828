"""Training loop, run configuration and parameter sweeps.

A run writes two files into its output directory:

* ``metrics.csv`` -- one row per evaluation point, columns as in
  :data:`METRIC_COLUMNS`, flushed row by row;
* ``summary.json`` -- ``config`` (feeding it back reproduces the run),
  ``final`` metrics, ``privacy`` accounting, ``timing`` and ``diagnostics``.
"""

import configparser
import csv
import dataclasses
import io
import itertools
import json
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import data, diagnostics, models
from .optimizers import ADAPTIVE, METHODS, NONPRIVATE_METHODS, LrSchedule, Method
from .privacy import PrivacyConfig, PrivacyLedger

METRIC_COLUMNS = (
    "step", "epoch", "phase", "train_loss", "train_metric", "test_loss", "test_metric",
    "epsilon", "clip_fraction", "grad_l2_mean", "D_l1", "hs_ratio")

NONPRIVATE = "non-private"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    model: str = "logreg"
    d: int = 0
    classes: int = 0
    num_users: int = 0
    num_items: int = 0
    embed_dim: int = 100
    multilabel_loss: str = "sigmoid"
    # data: files, or a synthetic task when train_path is empty
    train_path: str = ""
    test_path: str = ""
    id_map_path: str = ""
    synth_n: int = 10_000
    synth_d: int = 1_000
    synth_sparsity: int = 10
    synth_informative: int = 0
    synth_noise: float = 0.0
    synth_skew: float = 0.0
    synth_stopwords: int = 0
    synth_n_test: int = 0
    synth_seed: int = 0
    # optimisation
    optimizer: str = "dp2-rmsprop"
    epochs: int = 1
    batch_size: int = 64
    sigma: float = 1.0
    clip_sgd: float = 0.5
    clip_adaptive: float = 5.0
    lr_sgd: float = 0.1
    lr_adaptive: float = 3.0
    lr_schedule: str = "constant"
    beta: float = 0.9
    eps_adapt: float = 1e-5
    s1: int = 195
    s2: int = 0
    bias_correction: bool = False
    delta: float = 1e-5
    seed: int = 0
    # bookkeeping
    eval_every: int = 0
    track_hs: bool = False
    output_dir: str = ""

    def validate(self) -> "RunConfig":
        if self.model not in ("logreg", "multilabel", "matfac"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.optimizer not in METHODS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; one of {', '.join(METHODS)}")
        if self.lr_schedule not in ("constant", "invsqrt"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.s1 < 1 or self.s2 < 0:
            raise ConfigError("epochs, batch_size and s1 must be >= 1, s2 >= 0")
        if self.sigma < 0 or self.clip_sgd <= 0 or self.clip_adaptive <= 0:
            raise ConfigError("need sigma >= 0 and positive clipping thresholds")
        if self.lr_sgd <= 0 or self.lr_adaptive <= 0 or self.eps_adapt <= 0:
            raise ConfigError("learning rates and eps_adapt must be positive")
        if not 0 < self.beta < 1 or not 0 < self.delta < 1:
            raise ConfigError("beta and delta must lie in (0, 1)")
        if self.model == "multilabel" and not self.train_path:
            raise ConfigError("multilabel runs need train_path/test_path")
        return self

    @property
    def private(self) -> bool:
        return self.optimizer not in NONPRIVATE_METHODS and self.sigma > 0


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    typ = _FIELDS[key].type
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ)
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            val = float(raw)
            if not val.is_integer():
                raise ValueError(raw)
            return int(val)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {typ.__name__}, got {raw!r}") from None


def _parse_flat(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), strict=False)
    parser.optionxform = str
    parser.read_string("[__top__]\n" + text)
    out = {}
    for section in parser.sections():
        out.update(parser[section])
    return out


def load_config(path) -> RunConfig:
    """Read a flat ``key = value`` file (section headers are ignored)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return config_from_dict(_parse_flat(path.read_text()))


def config_from_dict(values: dict, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    for key, raw in values.items():
        val = raw if not isinstance(raw, str) else _coerce(key, raw)
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, val)
    return cfg


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``key=value`` strings on top of ``cfg``."""
    values = {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        values[key.strip()] = raw
    return config_from_dict(values, cfg)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in dataclasses.asdict(cfg).items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# Problem construction

def build_problem(cfg: RunConfig):
    """Return ``(train, test, model_kind)`` for ``cfg``."""
    if cfg.model == "matfac":
        if cfg.train_path:
            maps = data.load_id_maps(cfg.id_map_path) if cfg.id_map_path else None
            train = data.load_ratings(cfg.train_path, maps)
            maps = {"users": train.user_ids, "items": train.item_ids}
            test = data.load_ratings(cfg.test_path, maps) if cfg.test_path else train
        else:
            train, test = data.gen_synthetic_ratings(
                num_users=cfg.num_users or 100, num_items=cfg.num_items or 200,
                n=cfg.synth_n, seed=cfg.synth_seed)
        nu = cfg.num_users or train.num_users
        ni = cfg.num_items or train.num_items
        if nu < train.num_users or ni < train.num_items:
            raise ConfigError("declared num_users/num_items smaller than the data")
        return train, test, models.MatFac(nu, ni, cfg.embed_dim)

    classes = cfg.classes or None
    if cfg.model == "multilabel" and not classes:
        raise ConfigError("multilabel model needs classes > 0")
    if cfg.train_path:
        d = cfg.d or None
        train = data.load_sparse(cfg.train_path, d, classes if cfg.model == "multilabel" else None)
        d = d or train.d
        test = (data.load_sparse(cfg.test_path, d, train.num_classes)
                if cfg.test_path else train)
        if test.d != d:
            test = data.SparseDataset(test.X[:, :d] if test.d > d else
                                      _pad_cols(test.X, d), test.y, test.num_classes)
    else:
        spec = data.SynthSpec(
            n=cfg.synth_n, d=cfg.synth_d, sparsity=cfg.synth_sparsity,
            num_informative=cfg.synth_informative or None, label_noise=cfg.synth_noise,
            seed=cfg.synth_seed, n_test=cfg.synth_n_test or None, feature_skew=cfg.synth_skew,
            stopword_head=cfg.synth_stopwords)
        train, test = data.gen_synthetic(spec)
        d = train.d
    if cfg.d and cfg.d != d:
        raise ConfigError(f"declared d={cfg.d} does not match data d={d}")
    if cfg.model == "multilabel":
        return train, test, models.MultiLabel(d, classes, cfg.multilabel_loss)
    return train, test, models.LogReg(d)


def _pad_cols(X, d):
    X = X.copy()
    X.resize((X.shape[0], d))
    return X


def default_output_root() -> Path:
    return Path(os.environ.get("DP2_OUT_DIR", "runs"))


# ---------------------------------------------------------------------------
# Training

@dataclass
class RunMetrics:
    rows: list
    summary: dict
    out_dir: Optional[Path] = None
    v_snapshots: list = field(default_factory=list, repr=False)

    def final(self, key: str):
        return self.rows[-1][key]


def _csv_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_train(cfg: RunConfig, out_dir=None, keep_v: bool = False) -> RunMetrics:
    """Train one model according to ``cfg``.

    Files are written to ``out_dir`` (or ``cfg.output_dir``); pass
    ``out_dir=False`` to keep everything in memory. ``keep_v`` retains a
    copy of the preconditioner at every step of the run on the returned
    object (useful for moment checks, expensive for big models).
    """
    cfg.validate()
    t0 = time.perf_counter()
    train, test, kind = build_problem(cfg)
    init_ss, batch_ss, noise_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    params = models.init_params(kind, np.random.default_rng(init_ss))
    batch_rng = np.random.default_rng(batch_ss)
    noise_rng = np.random.default_rng(noise_ss)

    n, b = len(train), cfg.batch_size
    if b > n:
        raise ConfigError(f"batch_size {b} exceeds dataset size {n}")
    private = cfg.private
    privacy = PrivacyConfig(cfg.sigma if private else 0.0, cfg.clip_sgd, cfg.clip_adaptive,
                            b, n, cfg.delta)
    lr = (LrSchedule.invsqrt(cfg.lr_sgd) if cfg.lr_schedule == "invsqrt"
          else LrSchedule.constant(cfg.lr_sgd, cfg.lr_adaptive))
    ledger = PrivacyLedger()
    method = Method(cfg.optimizer, kind.size, privacy, lr, beta=cfg.beta,
                    eps_adapt=cfg.eps_adapt, s1=cfg.s1, s2=cfg.s2 or cfg.s1,
                    bias_correction=cfg.bias_correction, ledger=ledger,
                    track_clean=cfg.track_hs)
    has_delay = cfg.optimizer.startswith(("dp2-", "ablation"))
    hs = diagnostics.HsEstimate(kind.size, cfg.eps_adapt, cfg.s1) if (cfg.track_hs and has_delay) else None

    steps_per_epoch = math.ceil(n / b)
    total = cfg.epochs * steps_per_epoch
    eval_every = cfg.eval_every or steps_per_epoch
    metric = models.metric_name(kind)

    if out_dir is None:
        out_dir = Path(cfg.output_dir) if cfg.output_dir else (
            default_output_root() / f"{cfg.optimizer}-seed{cfg.seed}")
    out_dir = Path(out_dir) if out_dir is not False else None
    fh = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = (out_dir / "metrics.csv").open("w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        fh.flush()

    rows, snapshots, v_keep = [], [], []
    clip_acc, norm_acc, window = 0.0, 0.0, 0
    calls = 0
    report = None
    try:
        for t in range(total):
            batch = data.sample_batch(train, b, batch_rng)
            params, report = method.step(params, batch, noise_rng)
            calls += report.mechanism_calls
            clip_acc += report.clip_fraction
            norm_acc += report.grad_l2_mean
            window += 1
            if hs is not None and method.state.v_updates > 0:
                diagnostics.hs_update(hs, report.clean_grad_l1, method.state.last_moment_l1,
                                      report.noisy_grad_l1)
            if keep_v and method.v is not None:
                v_keep.append(method.v.copy())
            if (t + 1) % eval_every == 0 or t + 1 == total:
                tr = models.batch_eval(params, train)
                te = models.batch_eval(params, test)
                eps = ledger.epsilon(cfg.delta) if private else NONPRIVATE
                row = {
                    "step": t + 1, "epoch": (t + 1) / steps_per_epoch, "phase": report.phase,
                    "train_loss": tr["loss"], "train_metric": tr[metric],
                    "test_loss": te["loss"], "test_metric": te[metric], "epsilon": eps,
                    "clip_fraction": clip_acc / window, "grad_l2_mean": norm_acc / window,
                    "D_l1": report.D_l1, "hs_ratio": hs.running_max if hs is not None else float("nan"),
                }
                rows.append(row)
                if method.v is not None:
                    snapshots.append(diagnostics.snapshot_preconditioner(method.v, t + 1).to_dict())
                if writer is not None:
                    fh.write(",".join(_csv_value(row[c]) for c in METRIC_COLUMNS) + "\n")
                    fh.flush()
                clip_acc, norm_acc, window = 0.0, 0.0, 0
    finally:
        if fh is not None:
            fh.close()

    final_eps = ledger.epsilon(cfg.delta) if private else NONPRIVATE
    summary = {
        "config": dataclasses.asdict(cfg),
        "final": {k: rows[-1][k] for k in ("step", "train_loss", "train_metric",
                                           "test_loss", "test_metric")} | {"metric": metric},
        "privacy": {
            "epsilon": final_eps, "delta": cfg.delta, "sigma": privacy.sigma,
            "q": privacy.q, "steps": total, "mechanism_calls": calls,
            "accountant": "rdp-poisson-subsampled-gaussian",
            "releases": [list(r) for r in ledger.releases],
        },
        "timing": {"wall_seconds": time.perf_counter() - t0},
        "diagnostics": {
            "hs": hs.to_dict() if hs is not None else None,
            "snapshots": snapshots,
            "v_updates": getattr(method.state, "v_updates", None),
        },
    }
    if out_dir is not None:
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, default=_json_default))
    return RunMetrics(rows, summary, out_dir, v_keep)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# Sweeps

def _grid_points(grid: dict):
    keys = list(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, combo))


def _apply_point(base: RunConfig, point: dict) -> RunConfig:
    values = {}
    for key, val in point.items():
        if key == "s":
            values["s1"] = values["s2"] = val
        else:
            values[key] = val
    return config_from_dict({k: (_fmt(v) if not isinstance(v, str) else v) for k, v in values.items()}, base)


def _run_one(args):
    cfg, out_dir = args
    m = run_train(cfg, out_dir)
    return m.summary


def run_sweep(base: RunConfig, grid: dict, seeds=None, out_dir=None, cap: int = 512,
              workers: int = 1) -> list:
    """Run the cartesian product of ``grid`` (times ``seeds``).

    Grid key ``s`` sets both phase lengths. Writes one run directory per
    combination plus ``summary.csv`` (one row per run) and
    ``aggregate.csv`` (mean and sample std over seeds) in ``out_dir``.
    Returns the per-run rows.
    """
    if not grid:
        raise ConfigError("sweep grid is empty")
    seeds = list(seeds) if seeds is not None else [base.seed]
    points = list(_grid_points(grid))
    if len(points) * len(seeds) > cap:
        raise ConfigError(f"sweep size {len(points) * len(seeds)} exceeds cap {cap}")
    out_dir = Path(out_dir) if out_dir else default_output_root() / "sweep"
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs, keys = [], []
    for point in points:
        for seed in seeds:
            cfg = _apply_point(base, point)
            cfg.seed = seed
            cfg.validate()
            tag = "_".join(f"{k}={_fmt(v)}" for k, v in point.items()) + f"_seed{seed}"
            jobs.append((cfg, out_dir / tag))
            keys.append((point, seed))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            summaries = list(pool.map(_run_one, jobs))
    else:
        summaries = [_run_one(j) for j in jobs]

    rows = []
    for (point, seed), s in zip(keys, summaries):
        row = dict(point)
        row["seed"] = seed
        row.update({k: s["final"][k] for k in ("train_loss", "train_metric", "test_loss", "test_metric")})
        row["epsilon"] = s["privacy"]["epsilon"]
        rows.append(row)
    _write_table(out_dir / "summary.csv", rows)
    _write_table(out_dir / "aggregate.csv", aggregate(rows, list(grid)))
    return rows


def aggregate(rows: list, keys: list) -> list:
    """Mean and sample standard deviation over seeds for each grid point."""
    groups = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    out = []
    for point, members in groups.items():
        agg = dict(zip(keys, point))
        agg["seeds"] = len(members)
        for col in ("train_loss", "train_metric", "test_loss", "test_metric"):
            vals = [m[col] for m in members]
            agg[f"{col}_mean"] = statistics.fmean(vals)
            agg[f"{col}_std"] = statistics.stdev(vals) if len(vals) > 1 else 0.0
        agg["epsilon"] = members[0]["epsilon"]
        out.append(agg)
    return out


def _write_table(path: Path, rows: list) -> None:
    if not rows:
        return
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _csv_value(v) for k, v in r.items()})
    path.write_text(buf.getvalue())
