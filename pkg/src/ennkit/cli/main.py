"""``ennkit`` command-line entry point."""
from __future__ import annotations

import os

# One BLAS thread per process: cells are parallelised across processes and
# single-threaded BLAS keeps results bitwise reproducible.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import sys  # noqa: E402

from ennkit import __version__  # noqa: E402
from ennkit.cli import config as cfgmod  # noqa: E402
from ennkit.cli.orchestrate import default_parallelism, orchestrate  # noqa: E402


def _seeds(n):
    return list(range(n))


def _run(cfg, args):
    if args.workers:
        cfg.parallelism = args.workers
    elif cfg.parallelism == 1:
        cfg.parallelism = default_parallelism()
    manifest = orchestrate(cfg, args.out or cfg.out, log=(None if args.quiet else lambda m: print(m, flush=True)))
    n_fail = len(manifest.failed)
    print(f"{len(manifest.complete)}/{len(manifest.cells)} cells complete, {n_fail} failed -> {args.out or cfg.out}")
    for key in manifest.failed:
        err = manifest.cells[key]["error"] or ""
        print(f"  FAILED {key}: {err.splitlines()[0] if err else ''}", file=sys.stderr)
    return 1 if n_fail or manifest.pending else 0


def _load_or_build(args, kind, data):
    if getattr(args, "config", None):
        cfg = cfgmod.parse_config(args.config)
        if cfg.kind != kind:
            raise cfgmod.ConfigError([f"kind: config describes a {cfg.kind!r} experiment, expected {kind!r}"])
        return cfg
    return cfgmod.validate(data)


def cmd_testbed(args):
    cfg = cfgmod.parse_config(args.grid) if args.grid else cfgmod.validate({"kind": "testbed"})
    if cfg.kind != "testbed":
        raise cfgmod.ConfigError([f"kind: {args.grid} describes a {cfg.kind!r} experiment"])
    if not (args.out or cfg.out):
        raise cfgmod.ConfigError(["out: no output directory (use --out or set 'out' in the config)"])
    return _run(cfg, args)


def cmd_bandit(args):
    data = {
        "kind": "bandit",
        "roster": args.agent or None,
        "seeds": args.seeds,
        "grid": {"steps": args.steps, "temperature": args.temperature, "num_actions": args.num_actions, "input_dim": args.input_dim},
    }
    return _run(_load_or_build(args, "bandit", data), args)


def cmd_rl(args):
    data = {
        "kind": "rl",
        "roster": args.agent or None,
        "seeds": args.seeds,
        "grid": {"env": args.env, "size": args.size or [4, 6, 8, 10], "episodes": args.episodes, "stop_when_learned": not args.full_episodes},
    }
    return _run(_load_or_build(args, "rl", data), args)


def cmd_demo(args):
    return _run(_load_or_build(args, "demo_regression", {"kind": "demo_regression", "seeds": args.seeds}), args)


def cmd_plot(args):
    from ennkit.cli.plot import plot_results

    paths = plot_results(args.results, args.out, fmt=args.format)
    for p in paths:
        print(p)
    return 0


def cmd_selftest(args):
    from ennkit.cli.selftest import run_selftest

    return 0 if run_selftest(verbose=True) else 1


def cmd_checkpoint(args):
    import json

    from ennkit.enn.checkpoint import load

    model, params = load(args.path)
    info = {"family": model.family, "descriptor": model.descriptor(), "trainable_params": model.num_params, "total_params": len(params.flat)}
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ennkit", description="Epistemic neural network experiments")
    p.add_argument("--version", action="version", version=f"ennkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--workers", type=int, default=None, help=f"worker processes (default: ${cfgmod.PARALLELISM_ENV} or 1)")
        sp.add_argument("--quiet", action="store_true")

    tb = sub.add_parser("testbed", help="synthetic classification benchmark").add_subparsers(dest="action", required=True)
    tr = tb.add_parser("run")
    tr.add_argument("--grid", help="experiment config (YAML)")
    common(tr)
    tr.set_defaults(func=cmd_testbed)

    bd = sub.add_parser("bandit", help="neural bandit").add_subparsers(dest="action", required=True)
    br = bd.add_parser("run")
    br.add_argument("--config")
    br.add_argument("--agent", action="append", help="agent name (repeatable)")
    br.add_argument("--steps", type=int, default=5000)
    br.add_argument("--seeds", type=int, default=10)
    br.add_argument("--temperature", type=float, default=cfgmod.BANDIT_GRID_DEFAULTS["temperature"])
    br.add_argument("--num-actions", type=int, default=100)
    br.add_argument("--input-dim", type=int, default=10)
    common(br)
    br.set_defaults(func=cmd_bandit)

    rl = sub.add_parser("rl", help="episodic exploration with ENN-DQN").add_subparsers(dest="action", required=True)
    rr = rl.add_parser("run")
    rr.add_argument("--config")
    rr.add_argument("--env", default="deep_sea")
    rr.add_argument("--size", type=int, action="append", help="grid size (repeatable)")
    rr.add_argument("--agent", action="append")
    rr.add_argument("--episodes", type=int, default=10_000)
    rr.add_argument("--seeds", type=int, default=10)
    rr.add_argument("--full-episodes", action="store_true", help="do not stop once the agent has learned")
    common(rr)
    rr.set_defaults(func=cmd_rl)

    dm = sub.add_parser("demo-regression", help="bootstrap regression vs exact Bayes")
    dm.add_argument("--config")
    dm.add_argument("--seeds", type=int, default=20)
    common(dm)
    dm.set_defaults(func=cmd_demo)

    pl = sub.add_parser("plot", help="static figures from a results directory")
    pl.add_argument("results")
    pl.add_argument("--out", help="figure directory (default: <results>/figures)")
    pl.add_argument("--format", default="png", choices=["png", "svg", "pdf"])
    pl.set_defaults(func=cmd_plot)

    st = sub.add_parser("selftest", help="fast numerical sanity checks")
    st.set_defaults(func=cmd_selftest)

    ck = sub.add_parser("checkpoint", help="describe a saved model checkpoint")
    ck.add_argument("path")
    ck.set_defaults(func=cmd_checkpoint)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
