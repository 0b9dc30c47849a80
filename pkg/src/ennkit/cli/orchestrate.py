"""Expand a config into cells, run them (optionally in worker processes),
and collect results deterministically by cell key.

Layout of an output directory::

    manifest.json   config hash, version, per-cell seed and status
    config.yaml     the canonical config that produced the run
    cells/          one JSON file per completed cell (raw rows + trace)
    results.csv     all rows, sorted by cell key
    summary.json    aggregates
    timing.csv      wall-clock per cell (kept apart so results stay bitwise stable)
    traces/         per-cell CSV traces for bandit / rl runs
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np

from ennkit import __version__
from ennkit.cli import config as cfgmod

MANIFEST = "manifest.json"


@dataclass(frozen=True)
class Cell:
    key: str
    kind: str
    agent: str  # roster / variant name
    family: str
    hyper: dict
    agent_config: dict
    settings: dict  # problem / environment settings for this cell
    seed: int


@dataclass
class RunManifest:
    config_hash: str
    version: str
    kind: str
    cells: dict = field(default_factory=dict)  # key -> {"seed", "status", "attempts", "error"}

    @property
    def complete(self):
        return [k for k, c in self.cells.items() if c["status"] == "complete"]

    @property
    def failed(self):
        return [k for k, c in self.cells.items() if c["status"] == "failed"]

    @property
    def pending(self):
        return [k for k, c in self.cells.items() if c["status"] != "complete"]

    def to_dict(self):
        return {
            "config_hash": self.config_hash,
            "version": self.version,
            "kind": self.kind,
            "finished": not self.pending,
            "cells": {k: self.cells[k] for k in sorted(self.cells)},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["config_hash"], d["version"], d["kind"], dict(d["cells"]))

    def save(self, out_dir):
        _atomic_write(os.path.join(out_dir, MANIFEST), json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, out_dir):
        with open(os.path.join(out_dir, MANIFEST)) as fh:
            return cls.from_dict(json.load(fh))


def _atomic_write(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def cell_file(key):
    return hashlib.sha256(key.encode()).hexdigest()[:20] + ".json"


def trace_file(key):
    safe = "".join(ch if ch.isalnum() or ch in "-_.=," else "_" for ch in key)
    return safe + ".csv"


# --------------------------------------------------------------------------
# cell expansion


def expand_cells(cfg):
    from ennkit.testbed import sweep_variants

    g = cfg.grid
    cells = []
    if cfg.kind == "testbed":
        problems = [
            {"input_dim": d, "data_ratio": r, "temperature": t, "num_test": g["num_test"], "num_batches": g["num_batches"], "tau": g["tau"], "eval_indices": g["eval_indices"]}
            for d in g["input_dim"]
            for r in g["data_ratio"]
            for t in g["temperature"]
        ]
        for entry in cfg.roster:
            for vname, over in sweep_variants(entry.agent, entry.sweep or {}):
                name = entry.name + vname[len(entry.agent):]
                hyper = {**entry.hyper, **over}
                for p in problems:
                    pkey = f"D{p['input_dim']}_lam{p['data_ratio']:g}_rho{p['temperature']:g}"
                    for s in cfg.seeds:
                        cells.append(Cell(f"testbed/{name}/{pkey}/seed{s}", "testbed", name, entry.agent, hyper, {}, p, s))
    elif cfg.kind == "bandit":
        for entry in cfg.roster:
            for s in cfg.seeds:
                cells.append(Cell(f"bandit/{entry.name}/seed{s}", "bandit", entry.name, entry.agent, entry.hyper, entry.config, dict(g), s))
    elif cfg.kind == "rl":
        for entry in cfg.roster:
            for n in entry.sizes or g["size"]:
                settings = {"env": g["env"], "size": n, "episodes": g["episodes"], "stop_when_learned": g["stop_when_learned"]}
                for s in cfg.seeds:
                    cells.append(Cell(f"rl/{entry.name}/size{n:02d}/seed{s}", "rl", entry.name, entry.agent, entry.hyper, entry.config, settings, s))
    else:
        for s in cfg.seeds:
            cells.append(Cell(f"demo_regression/seed{s:03d}", "demo_regression", "epinet", "epinet", {}, {}, {}, s))
    keys = [c.key for c in cells]
    if len(set(keys)) != len(keys):
        raise cfgmod.ConfigError(["roster: two roster entries expand to the same cell names"])
    return cells


# --------------------------------------------------------------------------
# cell runners


def run_testbed_cell(cell):
    from ennkit.testbed import ProblemSpec, run_cell

    p = cell.settings
    spec = ProblemSpec(p["input_dim"], p["data_ratio"], p["temperature"], num_test=p["num_test"], num_batches=p["num_batches"], tau=p["tau"])
    rec = run_cell(cell.family, cell.hyper, spec, cell.seed, name=cell.agent, eval_indices=p["eval_indices"])
    return {"rows": [rec.row()]}


def _agent_config(cell, bandit):
    from ennkit.rl import AgentConfig

    base = {"enn": cell.family if cell.family != "uniform" else "mlp", "enn_hyper": dict(cell.hyper)}
    if bandit:
        base.update(gamma=0.0, index_batch=5)
    base.update(cell.agent_config)
    return AgentConfig(**base)


def run_bandit_cell(cell):
    from ennkit.numerics import derive_seed
    from ennkit.rl import BanditEnv, bandit_loop, make_agent

    p = cell.settings
    env = BanditEnv(p["num_actions"], p["input_dim"], p["temperature"], seed=cell.seed)
    agent = make_agent(cell.family, env.input_dim, env.num_actions, derive_seed(cell.seed, "agent", cell.agent), _agent_config(cell, True), env=env, bandit=True)
    regret = bandit_loop(env, agent, p["steps"], cell.seed)
    cum = np.cumsum(regret)
    row = {"agent": cell.agent, "seed": cell.seed, "steps": p["steps"], "cumulative_regret": float(cum[-1]), "mean_regret": float(regret.mean())}
    trace = [("step", "regret", "cumulative")] + [(t + 1, float(r), float(c)) for t, (r, c) in enumerate(zip(regret, cum))]
    return {"rows": [row], "trace": trace}


def run_rl_cell(cell):
    from ennkit.numerics import derive_seed
    from ennkit.rl import DeepSeaEnv, episodic_rl_loop, make_agent

    p = cell.settings
    env = DeepSeaEnv(p["size"], seed=cell.seed)
    agent = make_agent(cell.family, env.obs_dim, env.num_actions, derive_seed(cell.seed, "agent", cell.agent), _agent_config(cell, False), env=env)
    tr = episodic_rl_loop(env, agent, p["episodes"], cell.seed, stop_when_learned=p["stop_when_learned"])
    cum = np.cumsum(tr.returns)
    row = {
        "agent": cell.agent,
        "size": p["size"],
        "seed": cell.seed,
        "episodes_run": len(tr.returns),
        "learned_at": "" if tr.learned_at is None else tr.learned_at,
        "mean_return_last100": float(tr.returns[-100:].mean()),
    }
    trace = [("episode", "return", "cumulative")] + [(e + 1, float(r), float(c)) for e, (r, c) in enumerate(zip(tr.returns, cum))]
    return {"rows": [row], "trace": trace}


def run_demo_cell(cell):
    from ennkit.demo import run_regression_demo

    res = run_regression_demo([cell.seed])
    fields = ("seed", "probe", "enn_mean", "enn_std", "bayes_mean", "bayes_std")
    return {"rows": [dict(zip(fields, (int(r[0]),) + tuple(float(v) for v in r[1:]))) for r in res.rows()]}


RUNNERS = {"testbed": run_testbed_cell, "bandit": run_bandit_cell, "rl": run_rl_cell, "demo_regression": run_demo_cell}

RESULT_FIELDS = {
    "testbed": None,  # filled from METRIC_FIELDS lazily
    "bandit": ["agent", "seed", "steps", "cumulative_regret", "mean_regret"],
    "rl": ["agent", "size", "seed", "episodes_run", "learned_at", "mean_return_last100"],
    "demo_regression": ["seed", "probe", "enn_mean", "enn_std", "bayes_mean", "bayes_std"],
}


def default_runner(cell):
    return RUNNERS[cell.kind](cell)


def _execute(runner, cell):
    t0 = time.perf_counter()
    try:
        out = runner(cell)
        return cell.key, "complete", out, None, (time.perf_counter() - t0) * 1e3
    except Exception as exc:  # noqa: BLE001 - a failing cell is recorded, the run continues
        msg = f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=5)}"
        return cell.key, "failed", None, msg, (time.perf_counter() - t0) * 1e3


# --------------------------------------------------------------------------


def default_parallelism():
    try:
        return max(1, int(os.environ.get(cfgmod.PARALLELISM_ENV, "1")))
    except ValueError:
        return 1


def orchestrate(cfg, out_dir=None, runner=None, workers=None, log=None):
    """Run every incomplete cell of ``cfg`` and (re)write the merged artifacts.

    Returns the manifest.  Completed cells recorded in an existing manifest
    with the same config hash are not executed again.
    """
    out_dir = out_dir or cfg.out
    if not out_dir:
        raise ValueError("no output directory given")
    runner = runner or default_runner
    workers = workers or cfg.parallelism
    cells = expand_cells(cfg)
    by_key = {c.key: c for c in cells}
    os.makedirs(os.path.join(out_dir, "cells"), exist_ok=True)

    man_path = os.path.join(out_dir, MANIFEST)
    if os.path.exists(man_path):
        manifest = RunManifest.load(out_dir)
        if manifest.config_hash != cfg.hash():
            raise RuntimeError(
                f"{out_dir} holds results for config {manifest.config_hash}, not {cfg.hash()}; use a fresh directory"
            )
    else:
        manifest = RunManifest(cfg.hash(), __version__, cfg.kind)
    for c in cells:
        manifest.cells.setdefault(c.key, {"seed": c.seed, "status": "pending", "attempts": 0, "error": None})
    _atomic_write(os.path.join(out_dir, "config.yaml"), cfg.canonical())
    manifest.save(out_dir)

    todo = [by_key[k] for k in sorted(manifest.pending)]
    timings = _load_timings(out_dir)

    def collect(key, status, out, error, wall_ms):
        entry = manifest.cells[key]
        entry["attempts"] += 1
        if status == "complete":
            try:
                _atomic_write(os.path.join(out_dir, "cells", cell_file(key)), json.dumps({"key": key, **out}))
            except OSError as exc:
                status, error = "failed", f"could not store cell output: {exc}"
        entry["status"], entry["error"] = status, error
        timings[key] = wall_ms
        manifest.save(out_dir)
        if log:
            log(f"[{status}] {key} ({wall_ms / 1e3:.1f}s)")

    try:
        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_execute, runner, c) for c in todo]
                for fut in as_completed(futures):
                    collect(*fut.result())
        else:
            for c in todo:
                collect(*_execute(runner, c))
    finally:
        manifest.save(out_dir)
        _write_timings(out_dir, timings)
    write_artifacts(cfg, manifest, out_dir)
    return manifest


def _load_timings(out_dir):
    path = os.path.join(out_dir, "timing.csv")
    if not os.path.exists(path):
        return {}
    with open(path) as fh:
        return {r["key"]: float(r["wall_ms"]) for r in csv.DictReader(fh)}


def _write_timings(out_dir, timings):
    with open(os.path.join(out_dir, "timing.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "wall_ms"])
        for k in sorted(timings):
            w.writerow([k, f"{timings[k]:.1f}"])


def load_cell_outputs(manifest, out_dir):
    outs = {}
    for key in sorted(manifest.complete):
        with open(os.path.join(out_dir, "cells", cell_file(key))) as fh:
            outs[key] = json.load(fh)
    return outs


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def write_artifacts(cfg, manifest, out_dir):
    from ennkit.testbed import METRIC_FIELDS

    outs = load_cell_outputs(manifest, out_dir)
    fields = RESULT_FIELDS[cfg.kind] or METRIC_FIELDS
    rows = []
    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for key in sorted(outs):
            for r in outs[key]["rows"]:
                rows.append(r)
                w.writerow([_fmt(r[f]) for f in fields])
    trace_dir = os.path.join(out_dir, "traces")
    for key, out in outs.items():
        if "trace" in out:
            os.makedirs(trace_dir, exist_ok=True)
            with open(os.path.join(trace_dir, trace_file(key)), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(out["trace"][0])
                for t in out["trace"][1:]:
                    w.writerow([_fmt(v) for v in t])
    summary = {
        "config_hash": manifest.config_hash,
        "version": manifest.version,
        "kind": cfg.kind,
        "cells_total": len(manifest.cells),
        "cells_complete": len(manifest.complete),
        "cells_failed": len(manifest.failed),
        "aggregates": summarize(cfg.kind, rows),
    }
    _atomic_write(os.path.join(out_dir, "summary.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _mean_se(vals):
    v = np.asarray(vals, dtype=float)
    se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return {"mean": float(v.mean()), "se": se, "n": int(len(v))}


def seed_averaged(rows, metric, by="agent"):
    """Per ``by`` group: average ``metric`` over problems within each seed, then mean/se over seeds."""
    acc = {}
    for r in rows:
        acc.setdefault(r[by], {}).setdefault(r["seed"], []).append(float(r[metric]))
    return {g: _mean_se([np.mean(v) for _, v in sorted(per.items())]) for g, per in sorted(acc.items())}


def tuned_variants(rows, metric="joint_nll_tau10"):
    """Roster name -> its sweep variant with the lowest seed-averaged ``metric``.

    Variant names are ``<roster name>[hyper=value,...]``; an entry without a
    sweep is its own single variant.
    """
    scores = seed_averaged(rows, metric)
    best = {}
    for variant, stat in scores.items():
        base = variant.split("[", 1)[0]
        if base not in best or stat["mean"] < scores[best[base]]["mean"]:
            best[base] = variant
    return dict(sorted(best.items()))


def summarize(kind, rows):
    if not rows:
        return {}
    if kind == "testbed":
        out = {m: seed_averaged(rows, m) for m in ("error", "marginal_nll", "joint_nll_tau10")}
        out["tuned"] = tuned_variants(rows)
        return out
    if kind == "bandit":
        return {"cumulative_regret": seed_averaged(rows, "cumulative_regret")}
    if kind == "rl":
        out = {}
        for r in rows:
            g = out.setdefault(f"{r['agent']}/size{r['size']}", {"seeds": 0, "learned": 0, "episodes_to_learn": []})
            g["seeds"] += 1
            if r["learned_at"] != "":
                g["learned"] += 1
                g["episodes_to_learn"].append(int(r["learned_at"]))
        for g in out.values():
            e = g.pop("episodes_to_learn")
            g["median_episodes_to_learn"] = float(np.median(e)) if e else None
        return out
    # demo regression
    by_probe = {}
    for r in rows:
        by_probe.setdefault(r["probe"], []).append(r)
    mean_err = {p: float(np.mean([abs(r["enn_mean"] - r["bayes_mean"]) for r in rs])) for p, rs in by_probe.items()}
    std_err = {p: float(np.mean([abs(r["enn_std"] - r["bayes_std"]) / r["bayes_std"] for r in rs])) for p, rs in by_probe.items()}
    return {"max_mean_abs_error": max(mean_err.values()), "max_std_rel_error": max(std_err.values())}
