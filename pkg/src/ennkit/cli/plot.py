"""Static figures from a results directory.  Needs the optional ``plot`` extra."""
from __future__ import annotations

import csv
import json
import os


def _read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def plot_results(results_dir, out_dir=None, fmt="png"):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("plotting needs matplotlib: pip install 'ennkit[plot]'") from exc

    with open(os.path.join(results_dir, "summary.json")) as fh:
        kind = json.load(fh)["kind"]
    rows = _read_csv(os.path.join(results_dir, "results.csv"))
    out_dir = out_dir or os.path.join(results_dir, "figures")
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    def save(fig, name):
        path = os.path.join(out_dir, f"{name}.{fmt}")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)

    if kind == "testbed":
        by_agent = {}
        for r in rows:
            a = by_agent.setdefault(r["agent"], {"params": [], "joint": [], "error": []})
            a["params"].append(float(r["params"]))
            a["joint"].append(float(r["joint_nll_tau10"]))
            a["error"].append(float(r["error"]))
        fig, axes = plt.subplots(1, 2, figsize=(10, 4))
        for name, a in sorted(by_agent.items()):
            n = len(a["joint"])
            x = sum(a["params"]) / n
            axes[0].scatter(x, sum(a["error"]) / n, label=name, s=14)
            axes[1].scatter(x, sum(a["joint"]) / n, s=14)
        for ax, ylab in zip(axes, ("classification error", "joint NLL (tau=10)")):
            ax.set_xscale("log")
            ax.set_xlabel("trainable parameters")
            ax.set_ylabel(ylab)
        axes[0].legend(fontsize=6)
        save(fig, "testbed")
    elif kind == "bandit":
        fig, ax = plt.subplots(figsize=(6, 4))
        trace_dir = os.path.join(results_dir, "traces")
        curves = {}
        for f in sorted(os.listdir(trace_dir)):
            agent = f.split("_", 1)[1].rsplit("_seed", 1)[0] if f.startswith("bandit_") else f
            curves.setdefault(agent, []).append([float(r["cumulative"]) for r in _read_csv(os.path.join(trace_dir, f))])
        for agent, cs in sorted(curves.items()):
            n = min(len(c) for c in cs)
            mean = [sum(c[t] for c in cs) / len(cs) for t in range(n)]
            ax.plot(range(1, n + 1), mean, label=agent)
        ax.set_xlabel("step")
        ax.set_ylabel("cumulative regret")
        ax.legend()
        save(fig, "bandit_regret")
    elif kind == "rl":
        fig, ax = plt.subplots(figsize=(6, 4))
        groups = {}
        for r in rows:
            g = groups.setdefault(r["agent"], {})
            g.setdefault(int(r["size"]), []).append(r["learned_at"] != "")
        for agent, g in sorted(groups.items()):
            sizes = sorted(g)
            ax.plot(sizes, [sum(g[s]) / len(g[s]) for s in sizes], marker="o", label=agent)
        ax.set_xlabel("DeepSea size")
        ax.set_ylabel("fraction of seeds that learned")
        ax.legend()
        save(fig, "deep_sea")
    else:
        probes = sorted({float(r["probe"]) for r in rows})
        seed0 = min(int(r["seed"]) for r in rows)
        sel = sorted((r for r in rows if int(r["seed"]) == seed0), key=lambda r: float(r["probe"]))
        fig, ax = plt.subplots(figsize=(6, 4))
        for key, style, label in (("enn", "-", "epinet"), ("bayes", "--", "exact Bayes")):
            m = [float(r[f"{key}_mean"]) for r in sel]
            s = [float(r[f"{key}_std"]) for r in sel]
            ax.plot(probes, m, style, label=label)
            ax.fill_between(probes, [a - 2 * b for a, b in zip(m, s)], [a + 2 * b for a, b in zip(m, s)], alpha=0.2)
        ax.set_xlabel("x")
        ax.set_ylabel("posterior mean +/- 2 std")
        ax.legend()
        save(fig, "regression_bands")
    return paths
