"""Command-line entry point: ``ambs {train,eval,theory,gradcheck,sweep,plotdata}``."""

from __future__ import annotations

import argparse
import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _write_rows(rows, header, out):
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def _read_doc(path) -> dict:
    from . import config as cf

    cf.load(path)  # validates
    return json.loads(Path(path).read_text())


def cmd_train(args) -> int:
    from . import config as cf
    from .trainer import Trainer, TrainingError, write_outputs

    try:
        doc = _read_doc(args.config)
        if args.seed is not None:
            doc["seed"] = args.seed
            doc.pop("seeds", None)
        if args.frames is not None:
            doc["total_frames"] = args.frames
        if args.paper_literal_mu:
            doc.setdefault("lagrangian", {})["mu_rule"] = "literal"
        trainer = Trainer(cf.from_dict(doc))
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        trainer.run()
        evaluation = trainer.evaluate()
    except TrainingError as exc:
        print(f"runtime error in phase {exc.phase}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    write_outputs(trainer, args.out, evaluation)
    print(json.dumps({"out": str(args.out), "frames": trainer.frames,
                      "cum_violations": trainer.cum_violations, **evaluation}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import Trainer

    try:
        trainer = Trainer.restore(args.checkpoint)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    shielded = None if not args.no_shield else False
    res = trainer.evaluate(args.episodes, shielded=shielded, rng=np.random.default_rng(args.seed))
    print(json.dumps(res))
    return EXIT_OK


def cmd_theory(args) -> int:
    from .theory import run_suite

    rng = np.random.default_rng(args.seed)
    rows = run_suite(args.suite, rng, args.instances)
    out = open(args.out, "w") if args.out else sys.stdout
    _write_rows([(r.suite, r.instance, repr(r.quantity), repr(r.bound), int(r.passed), r.note)
                 for r in rows], ("suite", "instance", "quantity", "bound", "pass", "note"), out)
    if args.out:
        out.close()
    failed = [r for r in rows if not r.passed]
    for r in failed:
        print(f"FAILED {r.suite}[{r.instance}]: {r.quantity} > {r.bound} ({r.note})", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_all

    res = check_all(np.random.default_rng(args.seed), args.points, args.step)
    _write_rows([(k, repr(v)) for k, v in res.items()], ("operation", "max_rel_error"), sys.stdout)
    return EXIT_OK if max(res.values()) <= args.tolerance else EXIT_FAIL


def cmd_sweep(args) -> int:
    try:
        base = _read_doc(args.config)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    methods = args.methods.split(",") if args.methods else [base.get("method", "AMBS+PENL")]
    jobs = []
    for method in methods:
        for seed in [int(s) for s in args.seeds.split(",")]:
            run_dir = out / f"{method.replace('+', '_')}_seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            cfg_path = run_dir / "input_config.json"
            cfg_path.write_text(json.dumps({**base, "method": method}, indent=2, sort_keys=True))
            cmd = [sys.executable, "-m", "ambs.cli", "train", "--config", str(cfg_path),
                   "--seed", str(seed), "--out", str(run_dir)]
            if args.paper_literal_mu:
                cmd.append("--paper-literal-mu")
            jobs.append(cmd)
    status = EXIT_OK
    running = []
    for cmd in jobs:
        running.append(subprocess.Popen(cmd))
        if len(running) >= args.jobs:
            status = max(status, running.pop(0).wait())
    for proc in running:
        status = max(status, proc.wait())
    return status


def cmd_plotdata(args) -> int:
    from .trainer import METRICS_COLUMNS, read_metrics
    from scipy import stats

    try:
        runs = [read_metrics(p) for p in args.metrics]
    except ConfigurationError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    top = min(r["frames"].max() for r in runs if len(r["frames"])) if runs else 0
    edges = np.arange(args.bucket, top + args.bucket, args.bucket)
    for name in METRICS_COLUMNS[1:]:
        lines = ["# frames mean ci_low ci_high n"]
        for edge in edges:
            vals = []
            for r in runs:
                sel = (r["frames"] > edge - args.bucket) & (r["frames"] <= edge)
                if sel.any():
                    vals.append(float(np.nanmean(r[name][sel])) if np.any(~np.isnan(r[name][sel]))
                                else float("nan"))
            vals = np.array([v for v in vals if not np.isnan(v)])
            if len(vals) == 0:
                continue
            mean, half = confidence_interval(vals, stats)
            lines.append(f"{int(edge)} {mean!r} {mean - half!r} {mean + half!r} {len(vals)}")
        (out / f"{name}.dat").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def confidence_interval(values, stats=None, level=0.95):
    """Mean and t-based half-width; a single value has half-width 0."""
    if stats is None:
        from scipy import stats
    values = np.asarray(values, float)
    n = len(values)
    mean = float(values.mean())
    if n < 2:
        return mean, 0.0
    sem = values.std(ddof=1) / np.sqrt(n)
    return mean, float(stats.t.ppf(0.5 + level / 2, n - 1) * sem)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ambs", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one experiment")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--frames", type=int, help="override total_frames")
    t.add_argument("--paper-literal-mu", action="store_true",
                   help="use mu_{k+1} = max(mu_k^(1+sigma), 1) for the Lagrangian baseline")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--no-shield", action="store_true")
    e.set_defaults(func=cmd_eval)

    th = sub.add_parser("theory", help="validate the measure inequalities on random instances")
    th.add_argument("--suite", choices=("thm1", "thm2", "thm3", "lemma", "pinsker", "all"), default="all")
    th.add_argument("--instances", type=int)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--out")
    th.set_defaults(func=cmd_theory)

    g = sub.add_parser("gradcheck", help="finite-difference check of the gradient operations")
    g.add_argument("--points", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep", help="launch independent runs over methods and seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", default="0,1,2,3,4")
    s.add_argument("--methods")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--paper-literal-mu", action="store_true")
    s.set_defaults(func=cmd_sweep)

    pd = sub.add_parser("plotdata", help="aggregate metrics CSVs into mean +- 95%% CI tables")
    pd.add_argument("--metrics", nargs="+", required=True)
    pd.add_argument("--out", required=True)
    pd.add_argument("--bucket", type=int, default=10_000)
    pd.set_defaults(func=cmd_plotdata)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
