"""Command line entry point: ``dp2 {train,sweep,accountant,gen-data,diagnose}``."""

import argparse
import json
import sys
from pathlib import Path

from . import data, harness
from .privacy import compute_epsilon


def _parse_grid(items):
    grid = {}
    for item in items or ():
        if "=" not in item:
            raise harness.ConfigError(f"grid entry {item!r} is not key=v1,v2,...")
        key, vals = item.split("=", 1)
        grid[key.strip()] = [v.strip() for v in vals.split(",") if v.strip()]
    return grid


def _load(args):
    cfg = harness.load_config(args.config) if args.config else harness.RunConfig()
    return harness.apply_overrides(cfg, args.set).validate()


def cmd_train(args):
    cfg = _load(args)
    m = harness.run_train(cfg, args.out)
    s = m.summary
    print(f"final train_loss={s['final']['train_loss']:.6f} "
          f"test_{s['final']['metric']}={s['final']['test_metric']:.6f} "
          f"epsilon={s['privacy']['epsilon']}")
    print(f"wrote {m.out_dir}")
    return 0


def cmd_sweep(args):
    cfg = _load(args)
    grid = _parse_grid(args.grid)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows = harness.run_sweep(cfg, grid, seeds=seeds, out_dir=args.out, cap=args.cap,
                             workers=args.workers)
    print(f"{len(rows)} runs")
    return 0


def cmd_accountant(args):
    eps = compute_epsilon(args.q, args.sigma, args.steps, args.delta)
    print(repr(eps) if eps != float("inf") else "inf")
    return 0


def cmd_gen_data(args):
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        raise FileNotFoundError(f"spec file not found: {spec_path}")
    raw = harness._parse_flat(spec_path.read_text())
    types = {"n": int, "d": int, "sparsity": int, "num_informative": int,
             "label_noise": float, "seed": int, "n_test": int, "feature_skew": float,
             "stopword_head": int}
    unknown = set(raw) - set(types)
    if unknown:
        raise harness.ConfigError(f"unknown spec key(s): {', '.join(sorted(unknown))}")
    try:
        spec = data.SynthSpec(**{k: types[k](v) for k, v in raw.items()})
    except ValueError as exc:
        raise harness.ConfigError(str(exc)) from None
    train, test = data.gen_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.save_sparse(train, out / "train.txt")
    data.save_sparse(test, out / "test.txt")
    print(f"wrote {out / 'train.txt'} ({train.n}) and {out / 'test.txt'} ({test.n})")
    return 0


def cmd_diagnose(args):
    path = Path(args.run) / "summary.json"
    if not path.is_file():
        raise FileNotFoundError(f"no summary.json in {args.run}")
    summary = json.loads(path.read_text())
    diag = summary.get("diagnostics") or {}
    hs = diag.get("hs")
    if hs:
        ratios = hs["ratios"]
        print(f"h(s): s={hs['s']} steps={len(ratios)} max={hs['running_max']:.6g} "
              f"mean={sum(ratios) / max(len(ratios), 1):.6g}")
        if hs["noisy_ratios"]:
            print(f"h(s) noisy numerator: max={max(hs['noisy_ratios']):.6g}")
    else:
        print("h(s): not tracked (set track_hs=true on a dp2-*/ablation run)")
    for snap in diag.get("snapshots", []):
        q = snap["quantiles"]
        print(f"v@{snap['t']}: " + " ".join(f"q{k}={float(v):.3g}" for k, v in q.items()))
    print(f"epsilon={summary['privacy']['epsilon']} delta={summary['privacy']['delta']}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="dp2", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    for name, fn in (("train", cmd_train), ("sweep", cmd_sweep)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--out", help="output directory")
        sp.set_defaults(func=fn)
        if name == "sweep":
            sp.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2")
            sp.add_argument("--seeds", help="comma-separated seeds")
            sp.add_argument("--cap", type=int, default=512)
            sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("accountant")
    sp.add_argument("--q", type=float, required=True)
    sp.add_argument("--sigma", type=float, required=True)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--delta", type=float, default=1e-5)
    sp.set_defaults(func=cmd_accountant)

    sp = sub.add_parser("gen-data")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("diagnose")
    sp.add_argument("--run", required=True)
    sp.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (harness.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
