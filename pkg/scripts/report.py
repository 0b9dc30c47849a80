"""Print a plain-text summary of an experiment output directory.

    python scripts/report.py results/testbed_desk
"""
import argparse
import csv
import json
import os

from ennkit.cli.orchestrate import seed_averaged, tuned_variants


def load(out_dir):
    with open(os.path.join(out_dir, "summary.json")) as fh:
        summary = json.load(fh)
    with open(os.path.join(out_dir, "results.csv")) as fh:
        rows = list(csv.DictReader(fh))
    return summary, rows


def report_testbed(rows):
    tuned = tuned_variants(rows)
    print(f"{'agent':<12}{'tuned variant':<40}{'error':>9}{'marginal':>10}{'joint':>10}{'± se':>8}{'params':>9}")
    for base, variant in tuned.items():
        mine = [r for r in rows if r["agent"] == variant]
        err = seed_averaged(mine, "error")[variant]
        marg = seed_averaged(mine, "marginal_nll")[variant]
        joint = seed_averaged(mine, "joint_nll_tau10")[variant]
        params = sum(int(r["params"]) for r in mine) / len(mine)
        print(f"{base:<12}{variant:<40}{err['mean']:>9.4f}{marg['mean']:>10.4f}{joint['mean']:>10.3f}{joint['se']:>8.3f}{params:>9.0f}")


def report_bandit(rows):
    for agent, s in seed_averaged(rows, "cumulative_regret").items():
        print(f"{agent:<12} cumulative regret {s['mean']:9.1f} ± {s['se']:.1f}  ({s['n']} seeds)")


def report_rl(summary):
    for group, g in summary["aggregates"].items():
        med = g["median_episodes_to_learn"]
        print(f"{group:<20} learned {g['learned']:>2}/{g['seeds']}  median episodes {'-' if med is None else f'{med:.0f}'}")


def report_demo(summary, rows):
    agg = summary["aggregates"]
    print(f"{len({r['seed'] for r in rows})} seeds")
    print(f"max |mean error| over probes {agg['max_mean_abs_error']:.4f}")
    print(f"max relative std error over probes {100 * agg['max_std_rel_error']:.1f}%")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    args = ap.parse_args()
    summary, rows = load(args.out_dir)
    print(f"== {args.out_dir} ({summary['kind']}, {summary['cells_complete']}/{summary['cells_total']} cells, {summary['cells_failed']} failed)")
    kind = summary["kind"]
    if kind == "testbed":
        report_testbed(rows)
    elif kind == "bandit":
        report_bandit(rows)
    elif kind == "rl":
        report_rl(summary)
    else:
        report_demo(summary, rows)


if __name__ == "__main__":
    main()
