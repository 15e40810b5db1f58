"""Command-line experiment runner: ``python -m mdopt <command> ...``.

Commands: gen, train, eval, sweep, diagnose, pssim.  Every command writes into
``--out`` and echoes its effective config there as ``config.txt``.  Exit codes:
0 success, 1 error, 2 usage error, 3 divergence.
"""

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import checkpoint, config, data, diagnostics, metrics, ps, train
from .errors import ConfigError, DivergenceError, MdoptError
from .strategies import STRATEGIES, MdrState

log = logging.getLogger("mdopt")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
SWEEP_KEYS = ("alpha", "beta", "gamma", "k")
SWEEP_HEADER = ["alpha", "beta", "gamma", "k", "seed", "macro_auc"]
CHECKPOINT_NAME = "checkpoint.mdck"
# residuals the self-test gates on; the truncated three-domain expansion is reported only
SELFTEST_TOL = {"dn_taylor_n2": 1e-10, "dn_exact": 1e-10, "innergrad": 1e-12, "dr_identity": 1e-10}


class UsageError(MdoptError):
    pass


# -- shared plumbing ----------------------------------------------------------


def resolve_threads(arg):
    env = os.environ.get("MDOPT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"MDOPT_THREADS must be an integer, got {env!r}")
    return max(1, arg or 1)


def load_experiment(args):
    cfg = config.load(args.config) if args.config else config.ExperimentConfig()
    if getattr(args, "data", None):
        cfg = replace(cfg, data_path=args.data, synthetic=None)
    overrides = {}
    for name in ("strategy", "alpha", "beta", "gamma", "k", "epochs", "batch_size", "optimizer"):
        overrides[name] = getattr(args, name, None)
    overrides["inner_steps_per_domain"] = getattr(args, "inner_steps", None)
    if getattr(args, "select_best", False):
        overrides["select_best"] = True
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = cfg.with_overrides(**overrides)
    model = dict(cfg.model)
    if getattr(args, "embed_dim", None) is not None:
        model["embed_dim"] = args.embed_dim
    if getattr(args, "hidden", None):
        model["hidden"] = tuple(int(h) for h in args.hidden.split(","))
    return replace(cfg, model=model)


def load_dataset(cfg):
    """The configured dataset; without a source, the bundled conflict6 preset."""
    if cfg.data_path is not None:
        ds = data.load(cfg.data_path)
        if all(not (d.split != data.SPLIT_CODE["train"]).any() for d in ds.domains):
            ds = data.split(ds, seed=cfg.split_seed)
        return ds
    synth = cfg.synthetic_spec() if cfg.synthetic else data.conflict6()
    return data.split(data.generate(synth), seed=cfg.split_seed)


def prepare_out(args, cfg=None, name="config.txt"):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        text = config.dump(cfg)
        if args.config:
            text = Path(args.config).read_text(encoding="utf-8")
            text += "# effective values after command-line overrides\n" + config.dump(cfg)
        (out / name).write_text(text, encoding="utf-8")
    return out


def write_rows(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, header, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# -- commands ------------------------------------------------------------------


def cmd_gen(args):
    if args.preset:
        spec = data.conflict6(args.seed if args.seed is not None else 0)
    else:
        kw = {"seed": args.seed if args.seed is not None else 0}
        for name in ("n_domains", "samples_per_domain", "conflict_strength", "overlap_fraction"):
            if getattr(args, name) is not None:
                kw[name] = getattr(args, name)
        if args.negative_sampling:
            kw["negative_sampling"] = args.negative_sampling
        try:
            spec = data.SyntheticSpec(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    ds = data.split(data.generate(spec), seed=args.split_seed)
    out = prepare_out(args)
    echo = "".join(f"data.{k} = {config._render(v)}\n" for k, v in spec.__dict__.items())
    (out / "config.txt").write_text(echo + f"data.split_seed = {args.split_seed}\n", encoding="utf-8")
    path = data.save(ds, out / "data.csv")
    rows = data.domain_table(ds)
    print(f"{'domain':>6} {'samples':>8} {'pct':>7} {'n_pos':>7} {'n_neg':>7} {'ctr_ratio':>9}")
    for r in rows:
        print(
            f"{r['domain_id']:>6} {r['samples']:>8} {r['percentage']:>6.2f}% "
            f"{r['n_pos']:>7} {r['n_neg']:>7} {r['ctr_ratio']:>9.4f}"
        )
    print(f"wrote {path} ({len(ds)} rows, {ds.num_users} users, {ds.num_items} items)")
    return EXIT_OK


def cmd_train(args):
    cfg = load_experiment(args)
    ds = load_dataset(cfg)
    spec = cfg.model_spec(ds.num_users, ds.num_items)
    out = prepare_out(args, cfg)
    result = train.fit(ds, spec, cfg.train)
    write_rows(out / "val_metrics.csv", ["epoch", "grad_evals", "macro_auc", "seconds"], result.history)
    checkpoint.save(result.state, out / CHECKPOINT_NAME, {"strategy": cfg.train.strategy, "best_epoch": result.best_epoch})
    report = metrics.evaluate(result.state, ds, "test")
    report.write_csv(out / "test_metrics.csv")
    summary = {"strategy": cfg.train.strategy, "best_epoch": result.best_epoch, "test_macro_auc": report.macro_auc}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"{cfg.train.strategy}: test macro AUC {report.macro_auc:.4f} (epoch {result.best_epoch})")
    return EXIT_OK


def cmd_eval(args):
    state, _ = checkpoint.load(args.checkpoint)
    cfg = load_experiment(args)
    ds = load_dataset(cfg)
    out = prepare_out(args, cfg)
    report = metrics.evaluate(state, ds, args.split)
    report.write_csv(out / f"{args.split}_metrics.csv")
    for row in report.rows():
        print(f"domain {row['domain_id']}: auc {row['auc']:.4f} loss {row['loss']:.4f}")
    print(f"macro AUC {report.macro_auc:.4f}")
    return EXIT_OK


def parse_grid(items):
    if not items:
        raise UsageError("sweep needs at least one --grid key=v1,v2")
    grid = {}
    for item in items:
        key, sep, values = item.partition("=")
        key = key.strip()
        if not sep or key not in SWEEP_KEYS:
            raise UsageError(f"bad --grid {item!r}; keys are {', '.join(SWEEP_KEYS)}")
        kind = int if key == "k" else float
        try:
            parsed = [kind(v) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(f"bad value in --grid {item!r}") from exc
        if not parsed:
            raise UsageError(f"--grid {key} has no values")
        grid[key] = parsed
    return grid


def sweep_cells(base, grid, seeds):
    keys = list(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        for seed in seeds:
            yield replace(base, seed=seed, **dict(zip(keys, combo)))


def run_cell(ds, spec, cfg, out):
    result = train.fit(ds, spec, cfg)
    cell = out / "cells" / f"a{cfg.alpha:g}_b{cfg.beta:g}_g{cfg.gamma:g}_k{cfg.k}_s{cfg.seed}"
    cell.mkdir(parents=True, exist_ok=True)
    write_rows(cell / "val_metrics.csv", ["epoch", "grad_evals", "macro_auc", "seconds"], result.history)
    auc = metrics.evaluate(result.state, ds, "test").macro_auc
    return {"alpha": cfg.alpha, "beta": cfg.beta, "gamma": cfg.gamma, "k": cfg.k, "seed": cfg.seed, "macro_auc": auc}


def cmd_sweep(args):
    grid = parse_grid(args.grid)
    cfg = load_experiment(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.seeds or (cfg.train.seed,))
    ds = load_dataset(cfg)
    spec = cfg.model_spec(ds.num_users, ds.num_items)
    out = prepare_out(args, cfg)
    cells = list(sweep_cells(cfg.train, grid, seeds))
    for c in cells:
        c.check_domains(ds.n_domains)
    threads = resolve_threads(args.threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        rows = list(pool.map(lambda c: run_cell(ds, spec, c, out), cells))
    write_rows(out / "sweep.csv", SWEEP_HEADER, rows)
    for r in rows:
        print(",".join(str(r[k]) for k in SWEEP_HEADER))
    return EXIT_OK


def _selftest(out, seed):
    res = diagnostics.quadratic_selftest(seed)
    gated, info = {}, {}
    for name, value in res.items():
        tol = next((t for prefix, t in SELFTEST_TOL.items() if name.startswith(prefix)), None)
        (gated if tol is not None else info)[name] = {"residual": value, "tol": tol, "ok": tol is None or value <= tol}
    ok = all(v["ok"] for v in gated.values())
    payload = {"passed": ok, "checks": gated, "informational": info}
    (out / "selftest.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    for name, v in {**gated, **info}.items():
        flag = "ok" if v["tol"] is not None and v["ok"] else ("FAIL" if v["tol"] is not None else "info")
        print(f"{name:<28} {v['residual']:.3e} {flag}")
    return EXIT_OK if ok else EXIT_ERROR


def cmd_diagnose(args):
    cfg = load_experiment(args)
    out = prepare_out(args, cfg)
    seed = cfg.train.seed
    if args.selftest:
        return _selftest(out, seed)
    ds = load_dataset(cfg)
    if args.checkpoint:
        state, _ = checkpoint.load(args.checkpoint)
        spec = state.spec
    else:
        spec = cfg.model_spec(ds.num_users, ds.num_items)
        state = MdrState.initial(spec, ds.n_domains, seed)
    reports = [diagnostics.measure_conflict(spec, state.shared, ds, batch_size=args.probe_size)]
    series = [reports[0].mean_cosine]
    if args.epochs:
        more, extra, state = diagnostics.track_inner_products(
            cfg.train.strategy, ds, replace(cfg.train, select_best=False), args.epochs, spec,
            probe_size=args.probe_size, state=state,
        )
        series += more
        reports += extra
    diagnostics.write_pair_csv(reports, out / "conflict_pairs.csv")
    write_rows(out / "cosine_series.csv", ["epoch", "mean_cosine"], [{"epoch": i, "mean_cosine": c} for i, c in enumerate(series)])
    probes = diagnostics.probe_batches(ds, args.taylor_batch, seed)
    taylor = diagnostics.neural_taylor_residual(spec, state.shared, probes, cfg.train.alpha)
    last = reports[-1]
    diagnostics.write_summary(
        out / "summary.json", last.conflict_rate, last.mean_cosine, taylor, cosine_series=series,
        strategy=cfg.train.strategy,
    )
    print(f"conflict rate {last.conflict_rate:.3f}, mean cosine {last.mean_cosine:.4f}, taylor residual {taylor:.3e}")
    return EXIT_OK


def cmd_pssim(args):
    cfg = load_experiment(args)
    ds = load_dataset(cfg)
    spec = cfg.model_spec(ds.num_users, ds.num_items)
    tcfg = replace(cfg.train, strategy="mamdr")
    out = prepare_out(args, replace(cfg, train=tcfg))
    rounds = args.rounds if args.rounds is not None else tcfg.epochs
    server = ps.ServerState(MdrState.initial(spec, ds.n_domains, tcfg.seed))
    shards = ps.partition(ds, args.m, tcfg.seed)
    server, rows = ps.run(server, shards, tcfg, rounds, ds, threads=resolve_threads(args.threads))
    ps.write_round_log(rows, out / "round_log.csv")
    checkpoint.save(server.global_state, out / CHECKPOINT_NAME, {"strategy": "mamdr", "workers": args.m})
    report = metrics.evaluate(server.global_state, ds, "test")
    report.write_csv(out / "test_metrics.csv")
    print(f"pssim m={args.m} rounds={rounds}: test macro AUC {report.macro_auc:.4f}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--data", help="dataset CSV (default: the bundled conflict6 preset)")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--alpha", type=float, help="inner learning rate")
    p.add_argument("--beta", type=float, help="DN outer rate")
    p.add_argument("--gamma", type=float, help="DR outer rate")
    p.add_argument("--k", type=int, help="DR auxiliary domains per target")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--inner-steps", type=int, help="minibatches per domain per epoch")
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--select-best", action="store_true", help="keep the best-validation epoch")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--hidden", help="comma-separated MLP widths, e.g. 64,32")


def build_parser():
    def global_flags(p, defaults):
        # sub-command copies use SUPPRESS so flags given before the command survive
        d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
        p.add_argument("--config", default=d(None), help="key=value config file")
        p.add_argument("--seed", type=int, default=d(None))
        p.add_argument("--out", default=d("out"), help="output directory")
        p.add_argument("--threads", type=int, default=d(1), help="worker threads (MDOPT_THREADS overrides)")
        p.add_argument("-v", "--verbose", action="store_true", default=d(False))

    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, defaults=False)
    parser = argparse.ArgumentParser(prog="mdopt", description=__doc__.splitlines()[0])
    global_flags(parser, defaults=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic multi-domain dataset")
    p.add_argument("--preset", choices=config.PRESETS)
    p.add_argument("--domains", dest="n_domains", type=int)
    p.add_argument("--samples", dest="samples_per_domain", type=int)
    p.add_argument("--conflict", dest="conflict_strength", type=float)
    p.add_argument("--overlap", dest="overlap_fraction", type=float)
    p.add_argument("--negative-sampling", choices=("per_user", "global"))
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train one strategy")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", choices=data.SPLITS, default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="grid over alpha/beta/gamma/k")
    _add_train_flags(p)
    p.add_argument("--grid", action="append", help="key=v1,v2 (repeatable)")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diagnose", parents=[common], help="gradient conflict and expansion checks")
    _add_train_flags(p)
    p.add_argument("--selftest", action="store_true", help="quadratic oracle self-test only")
    p.add_argument("--checkpoint")
    p.add_argument("--probe-size", type=int, help="rows per domain probe (default: whole split)")
    p.add_argument("--taylor-batch", type=int, default=256)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("pssim", parents=[common], help="parameter-server simulation of MAMDR")
    _add_train_flags(p)
    p.add_argument("-m", "--workers", dest="m", type=int, default=1)
    p.add_argument("--rounds", type=int)
    p.set_defaults(func=cmd_pssim)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mdopt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"mdopt: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MdoptError, OSError) as exc:
        print(f"mdopt: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
