"""Experiment configuration: a YAML document validated into ``ExperimentConfig``.

Every problem in the file is reported at once (``ConfigError.errors``), each
message prefixed with the offending field path and, when known, its line.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import yaml

from ennkit.rl.agents import AgentConfig, RL_AGENT_DEFAULTS
from ennkit.testbed import AGENT_DEFAULTS, AGENT_SWEEPS

KINDS = ("testbed", "bandit", "rl", "demo_regression")
PARALLELISM_ENV = "ENNKIT_WORKERS"

TESTBED_GRID_DEFAULTS = {
    "input_dim": [2, 10],
    "data_ratio": [1, 10, 100],
    "temperature": [0.1, 0.5],
    "num_test": 1000,
    "num_batches": 1000,
    "tau": 10,
    "eval_indices": 100,
}
BANDIT_GRID_DEFAULTS = {"num_actions": 100, "input_dim": 10, "temperature": 0.5, "steps": 5000}
RL_GRID_DEFAULTS = {"env": "deep_sea", "size": [4, 6, 8, 10], "episodes": 10_000, "stop_when_learned": True}
DEMO_GRID_DEFAULTS = {}

GRID_DEFAULTS = {
    "testbed": TESTBED_GRID_DEFAULTS,
    "bandit": BANDIT_GRID_DEFAULTS,
    "rl": RL_GRID_DEFAULTS,
    "demo_regression": DEMO_GRID_DEFAULTS,
}
LIST_KEYS = {"testbed": ("input_dim", "data_ratio", "temperature"), "rl": ("size",)}
DEFAULT_ROSTER = {
    "testbed": ["mlp", "ensemble", "ensemble+", "dropout", "hypermodel", "epinet"],
    "bandit": ["uniform", "mlp", "epinet"],
    "rl": ["mlp", "ensemble+", "epinet"],
    "demo_regression": ["epinet"],
}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def valid_agents(kind):
    if kind == "testbed":
        return sorted(AGENT_DEFAULTS)
    if kind in ("bandit", "rl"):
        return sorted(RL_AGENT_DEFAULTS) + ["uniform"]
    return ["epinet"]


@dataclass
class RosterEntry:
    agent: str
    name: str = None
    hyper: dict = field(default_factory=dict)
    sweep: dict = None  # testbed only; None -> the family's default sweep
    config: dict = field(default_factory=dict)  # bandit / rl AgentConfig overrides
    sizes: list = None  # rl only: subset of grid.size for this agent; None -> all

    def __post_init__(self):
        if self.name is None:
            self.name = self.agent


@dataclass
class ExperimentConfig:
    kind: str
    roster: list
    grid: dict
    seeds: list
    out: str = None
    parallelism: int = 1

    def to_dict(self):
        d = asdict(self)
        d["roster"] = [{k: v for k, v in asdict(r).items() if not (k == "sizes" and v is None)} for r in self.roster]
        return d

    def canonical(self):
        """Deterministic YAML text: sorted keys, block style; hashing uses this."""
        d = self.to_dict()
        d.pop("out")
        d.pop("parallelism")  # execution detail, does not change results
        return yaml.safe_dump(_plain(d), sort_keys=True, default_flow_style=False)

    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def dump_config(cfg):
    """Full human-editable form (includes ``out`` and ``parallelism``)."""
    return yaml.safe_dump(_plain(cfg.to_dict()), sort_keys=True, default_flow_style=False)


# --------------------------------------------------------------------------


def _line_map(node, path=(), out=None):
    """Map each mapping/sequence path to its 1-based source line."""
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            _line_map(v, path + (k.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (i,), out)
    return out


class _Errors:
    def __init__(self, lines):
        self.lines = lines
        self.items = []

    def add(self, path, msg):
        where = ".".join(str(p) for p in path) or "<root>"
        line = None
        for cut in range(len(path), -1, -1):
            line = self.lines.get(tuple(path[:cut]))
            if line is not None:
                break
        self.items.append(f"{where}{f' (line {line})' if line else ''}: {msg}")


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _check_grid(kind, grid, err):
    defaults = GRID_DEFAULTS[kind]
    out = dict(defaults)
    if grid is None:
        grid = {}
    if not isinstance(grid, dict):
        err.add(("grid",), f"must be a mapping, got {type(grid).__name__}")
        return out
    for k, v in grid.items():
        if k not in defaults:
            err.add(("grid", k), f"unknown grid field; valid fields: {sorted(defaults)}")
            continue
        if k in LIST_KEYS.get(kind, ()):
            vals = v if isinstance(v, list) else [v]
            if not vals:
                err.add(("grid", k), "must list at least one value")
            bad = [x for x in vals if not _is_num(x) or x <= 0]
            if bad:
                err.add(("grid", k), f"values must be positive numbers, got {bad}")
            if k in ("input_dim", "size") and any(_is_num(x) and not float(x).is_integer() for x in vals):
                err.add(("grid", k), "values must be integers")
            out[k] = [int(x) if k in ("input_dim", "size") and _is_num(x) else x for x in vals]
        elif k == "env":
            if v != "deep_sea":
                err.add(("grid", k), "only 'deep_sea' is available")
            out[k] = v
        elif k == "stop_when_learned":
            if not isinstance(v, bool):
                err.add(("grid", k), f"must be true/false, got {v!r}")
            out[k] = v
        else:
            if not _is_num(v) or v <= 0:
                err.add(("grid", k), f"must be a positive number, got {v!r}")
            elif isinstance(defaults[k], int) and not float(v).is_integer():
                err.add(("grid", k), f"must be an integer, got {v!r}")
            else:
                v = int(v) if isinstance(defaults[k], int) else v
            out[k] = v
    return out


def _check_roster(kind, roster, err, grid=None):
    if roster is None:
        roster = DEFAULT_ROSTER[kind]
    if not isinstance(roster, list) or not roster:
        err.add(("roster",), "must be a non-empty list of agent names or mappings")
        return []
    valid = valid_agents(kind)
    cfg_fields = set(AgentConfig.__dataclass_fields__) - {"enn", "enn_hyper"}
    out, names = [], set()
    for i, item in enumerate(roster):
        if isinstance(item, str):
            item = {"agent": item}
        if not isinstance(item, dict) or "agent" not in item:
            err.add(("roster", i), "entry must be an agent name or a mapping with an 'agent' key")
            continue
        extra = set(item) - {"agent", "name", "hyper", "sweep", "config", "sizes"}
        if extra:
            err.add(("roster", i), f"unknown keys {sorted(extra)}")
        agent = item["agent"]
        if agent not in valid:
            err.add(("roster", i, "agent"), f"unknown agent {agent!r}; valid agents: {valid}")
            continue
        hyper = item.get("hyper") or {}
        if not isinstance(hyper, dict):
            err.add(("roster", i, "hyper"), "must be a mapping")
            hyper = {}
        known = AGENT_DEFAULTS.get(agent) if kind == "testbed" else RL_AGENT_DEFAULTS.get(agent, {})
        allowed = set(known or {}) | ({"steps", "batch_size", "lr", "index_batch", "param_budget"} if kind == "testbed" else set())
        for k in hyper:
            if k not in allowed:
                err.add(("roster", i, "hyper", k), f"unknown hyperparameter for {agent}; valid: {sorted(allowed)}")
        sweep = item.get("sweep")
        if sweep is not None:
            if kind != "testbed":
                err.add(("roster", i, "sweep"), "sweeps are only supported for testbed experiments")
            elif not isinstance(sweep, dict) or not all(isinstance(v, list) and v for v in sweep.values()):
                err.add(("roster", i, "sweep"), "must map hyperparameter names to non-empty lists")
                sweep = None
            else:
                for k in sweep:
                    if k not in allowed:
                        err.add(("roster", i, "sweep", k), f"unknown hyperparameter for {agent}; valid: {sorted(allowed)}")
        elif kind == "testbed":
            sweep = {k: list(v) for k, v in AGENT_SWEEPS.get(agent, {}).items()}
        config = item.get("config") or {}
        if not isinstance(config, dict):
            err.add(("roster", i, "config"), "must be a mapping")
            config = {}
        for k in config:
            if kind not in ("bandit", "rl") or k not in cfg_fields:
                err.add(("roster", i, "config", k), f"unknown agent config field; valid: {sorted(cfg_fields)}")
        sizes = item.get("sizes")
        if sizes is not None:
            grid_sizes = (grid or {}).get("size") or []
            if kind != "rl":
                err.add(("roster", i, "sizes"), "per-agent sizes are only supported for rl experiments")
                sizes = None
            elif not isinstance(sizes, list) or not sizes or not all(isinstance(n, int) and not isinstance(n, bool) for n in sizes):
                err.add(("roster", i, "sizes"), "must be a non-empty list of integers")
                sizes = None
            elif not set(sizes) <= set(grid_sizes) or len(set(sizes)) != len(sizes):
                err.add(("roster", i, "sizes"), f"must be distinct values from grid.size {grid_sizes}")
                sizes = None
            else:
                sizes = list(sizes)
        name = item.get("name") or agent
        if name in names:
            err.add(("roster", i, "name"), f"duplicate roster name {name!r}")
        names.add(name)
        hyper = {k: (list(v) if isinstance(v, tuple) else v) for k, v in hyper.items()}
        out.append(RosterEntry(agent, name, hyper, sweep, dict(config), sizes))
    return out


def validate(data, lines=None):
    err = _Errors(lines or {})
    if not isinstance(data, dict):
        raise ConfigError([f"<root>: expected a mapping, got {type(data).__name__}"])
    for k in set(data) - {"kind", "roster", "grid", "seeds", "out", "parallelism"}:
        err.add((k,), "unknown top-level field")
    kind = data.get("kind")
    if kind not in KINDS:
        err.add(("kind",), f"must be one of {list(KINDS)}, got {kind!r}")
        raise ConfigError(err.items)
    seeds = data.get("seeds", 5 if kind == "testbed" else 10)
    if _is_int(seeds) and seeds > 0:
        seeds = list(range(seeds))
    elif not (isinstance(seeds, list) and seeds and all(_is_int(s) and s >= 0 for s in seeds)):
        err.add(("seeds",), f"must be a positive count or a list of non-negative integers, got {seeds!r}")
        seeds = []
    elif len(set(seeds)) != len(seeds):
        err.add(("seeds",), "seed list has duplicates")
    par = data.get("parallelism", 1)
    if not _is_int(par) or par < 1:
        err.add(("parallelism",), f"must be an integer >= 1, got {par!r}")
        par = 1
    out = data.get("out")
    if out is not None and not isinstance(out, str):
        err.add(("out",), "must be a path string")
    grid = _check_grid(kind, data.get("grid"), err)
    roster = _check_roster(kind, data.get("roster"), err, grid)
    if err.items:
        raise ConfigError(err.items)
    return ExperimentConfig(kind, roster, grid, seeds, out, par)


def parse_config_text(text):
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"<root>: not valid YAML: {exc}"]) from exc
    return validate(data, _line_map(node) if node is not None else {})


def parse_config(path):
    with open(path) as fh:
        return parse_config_text(fh.read())
