"""Batch experiment runner.

A run reads one YAML config, executes a single task and writes CSV / JSON
artifacts plus a manifest into the output directory. Every CSV row carries
the config hash and seed. Outputs contain no timestamps or host details, so
rerunning a config reproduces them byte for byte; the worker count is not
part of the hash and does not change any output.

Example config::

    task: verify-theorem1
    seed: 7
    trials: 100000
    model: {kind: rayleigh, snr: 1.0, m_beams: 2, n_users: 10}
    policies:
      - {kind: random_box_union, count: 20, seed: 0}
    match: {kind: auto, samples: 1000000}

Exit codes: 0 success, 2 config error, 3 verification FAIL, 4 I/O error.
"""

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field

import yaml

from . import __version__, optimizer, threshold
from .exceptions import ConfigurationError, DomainError, PolicyKindError, ShapeError
from .fading import ChannelModel
from .policy import PolicySpec, random_box_union_policy, random_max_sinr_box_union_policy
from .scheduler import difference_estimate, rate_estimate, simulate_rates

__all__ = ["ExperimentConfig", "ResultBundle", "load_config", "validate", "run", "write_bundle", "main"]

EXIT_OK, EXIT_CONFIG, EXIT_FAIL, EXIT_IO = 0, 2, 3, 4

TASKS = ("simulate", "match", "verify-theorem1", "verify-chain", "classify-events", "optimize")
POLICY_TASKS = TASKS[:5]
MATCH_KINDS = ("auto", "gtfp", "mtfp")
OPT_METHODS = ("homogeneous", "coordinate", "grid", "symmetric-grid")
TOP_KEYS = {"task", "seed", "trials", "model", "policies", "compare", "budget", "match",
            "optimize", "log_base", "jobs", "out"}
GENERATORS = {"random_box_union", "random_max_sinr_box_union"}
# keys that do not affect results and are left out of the config hash
UNHASHED = ("jobs", "out")


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return data


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _expand_policies(raw, model):
    out = []
    for entry in raw:
        if entry.get("kind") in GENERATORS:
            count, base = int(entry.get("count", 1)), int(entry["seed"])
            for j in range(count):
                s = base + j
                if entry["kind"] == "random_box_union":
                    out.append(random_box_union_policy(model.n_users, model.m_beams, s, f"box-{s}"))
                else:
                    out.append(random_max_sinr_box_union_policy(model.n_users, s, f"mbox-{s}"))
        else:
            out.append(PolicySpec.from_dict(entry, model))
    return out


def validate(config):
    """All problems found in a config mapping; empty when it is runnable."""
    diags = []
    if not isinstance(config, dict):
        return ["config must be a mapping"]
    unknown = set(config) - TOP_KEYS
    if unknown:
        diags.append(f"unknown keys: {sorted(unknown)}")
    task = config.get("task")
    if task not in TASKS:
        diags.append(f"task must be one of {list(TASKS)}, got {task!r}")
    if "seed" not in config:
        diags.append("seed is required")
    elif not _is_int(config["seed"]) or config["seed"] < 0:
        diags.append("seed must be a nonnegative integer")
    trials = config.get("trials", 10**5)
    if not _is_int(trials) or trials < 100:
        diags.append("trials must be an integer >= 100")
    if config.get("log_base", "nats") not in ("nats", "bits"):
        diags.append("log_base must be 'nats' or 'bits'")
    jobs = config.get("jobs", 1)
    if not _is_int(jobs) or jobs < 1:
        diags.append("jobs must be a positive integer")

    model = None
    if not isinstance(config.get("model"), dict):
        diags.append("model block is required")
    else:
        try:
            model = ChannelModel.from_dict(config["model"])
        except (ConfigurationError, TypeError, ValueError) as exc:
            diags.append(f"model: {exc}")

    match = config.get("match", {}) or {}
    if not isinstance(match, dict):
        diags.append("match must be a mapping")
        match = {}
    if match.get("kind", "auto") not in MATCH_KINDS:
        diags.append(f"match.kind must be one of {list(MATCH_KINDS)}")
    samples = match.get("samples", 10**6)
    if not _is_int(samples) or samples < 1000:
        diags.append("match.samples must be an integer >= 1000")

    policies = []
    raw = config.get("policies")
    if task in POLICY_TASKS:
        if not raw:
            diags.append(f"task {task} needs at least one policy")
        elif not isinstance(raw, list) or not all(isinstance(p, dict) for p in raw):
            diags.append("policies must be a list of mappings")
        elif model is not None:
            for k, entry in enumerate(raw):
                if "rules" in entry and len(entry["rules"]) != model.n_users:
                    diags.append(f"policy {k} has {len(entry['rules'])} rules but the model has "
                                 f"{model.n_users} users")
                    continue
                if entry.get("kind") in GENERATORS and "seed" not in entry:
                    diags.append(f"policy {k}: generated policies need a seed")
                    continue
                try:
                    policies.extend(_expand_policies([entry], model))
                except (ConfigurationError, DomainError, ShapeError, KeyError, TypeError,
                        ValueError) as exc:
                    diags.append(f"policy {k}: {exc}")
            labels = [p.label for p in policies]
            if len(set(labels)) != len(labels):
                diags.append("policy labels must be unique")
            if match.get("kind") == "mtfp" and task != "simulate":
                for p in policies:
                    if not p.is_max_sinr:
                        diags.append(f"policy {p.label!r}: max-SINR matching needs a max-SINR policy")
    compare = config.get("compare", [])
    labels = {p.label for p in policies}
    for pair in compare or []:
        if not (isinstance(pair, list) and len(pair) == 2):
            diags.append(f"compare entries must be [label, label] pairs, got {pair!r}")
            continue
        for lab in pair:
            if policies and lab not in labels:
                diags.append(f"compare references unknown policy {lab!r}")

    budget = config.get("budget")
    numeric_budget = isinstance(budget, (int, float)) and not isinstance(budget, bool)
    if budget is not None and not numeric_budget:
        diags.append("budget must be a number")
    elif numeric_budget and budget < 0:
        diags.append("infeasible feedback budget")
    if task == "optimize":
        if budget is None:
            diags.append("optimize needs a budget")
        opt = config.get("optimize", {}) or {}
        method = opt.get("method", "coordinate")
        if method not in OPT_METHODS:
            diags.append(f"optimize.method must be one of {list(OPT_METHODS)}")
        if opt.get("policy_kind", "gtfp") not in ("gtfp", "mtfp"):
            diags.append("optimize.policy_kind must be 'gtfp' or 'mtfp'")
        if method in ("grid", "symmetric-grid"):
            if not 0 < opt.get("resolution", 0.02) <= 0.1:
                diags.append("optimize.resolution must lie in (0, 0.1]")
            if model is not None and model.n_users > 3:
                diags.append("grid search is limited to n <= 3 users")
        if method == "homogeneous" and numeric_budget and budget == 0:
            diags.append("infeasible feedback budget")
    return diags


@dataclass
class ExperimentConfig:
    task: str
    seed: int
    model: ChannelModel
    policies: list
    trials: int = 10**5
    budget: float = None
    log_base: str = "nats"
    jobs: int = 1
    match: dict = field(default_factory=dict)
    optimize: dict = field(default_factory=dict)
    compare: list = field(default_factory=list)
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, config):
        diags = validate(config)
        if diags:
            raise ConfigurationError("; ".join(diags))
        model = ChannelModel.from_dict(config["model"])
        policies = _expand_policies(config.get("policies") or [], model)
        return cls(
            task=config["task"], seed=config["seed"], model=model, policies=policies,
            trials=config.get("trials", 10**5), budget=config.get("budget"),
            log_base=config.get("log_base", "nats"), jobs=config.get("jobs", 1),
            match=dict(config.get("match") or {}), optimize=dict(config.get("optimize") or {}),
            compare=[tuple(c) for c in config.get("compare") or []], raw=copy.deepcopy(config),
        )

    @property
    def config_hash(self):
        canon = {k: v for k, v in self.raw.items() if k not in UNHASHED}
        blob = json.dumps(canon, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ResultBundle:
    config_hash: str
    seed: int
    task: str
    outputs: dict
    passed: bool = True

    @property
    def exit_code(self):
        return EXIT_OK if self.passed else EXIT_FAIL


def _jsonable(x):
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if hasattr(x, "item"):
        return _jsonable(x.item())
    return x


def _json_bytes(obj):
    return (json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n").encode()


def _csv_bytes(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["inf" if isinstance(v, float) and math.isinf(v) else v for v in row])
    return buf.getvalue().encode()


LONG_HEADER = ("config_hash", "seed", "task", "item", "index", "metric", "value")


class _Long:
    def __init__(self, cfg):
        self.prefix = (cfg.config_hash, cfg.seed, cfg.task)
        self.rows = []

    def add(self, item, index, metric, value):
        self.rows.append(self.prefix + (item, "" if index is None else index, metric, value))

    def to_bytes(self):
        return _csv_bytes(LONG_HEADER, self.rows)


def _match_kwargs(cfg):
    return {"samples": cfg.match.get("samples", 10**6), "seed": cfg.seed}


def _task_simulate(cfg):
    rates = simulate_rates(cfg.policies, cfg.model, cfg.trials, cfg.seed, cfg.jobs)
    by_label = {p.label: r for p, r in zip(cfg.policies, rates)}
    long = _Long(cfg)
    report = {"rates": [], "differences": []}
    for p, r in zip(cfg.policies, rates):
        est = rate_estimate(r, cfg.seed, cfg.log_base)
        long.add(p.label, None, "rate", est.mean)
        long.add(p.label, None, "std_error", est.std_error)
        for m, v in enumerate(est.per_beam_means):
            long.add(p.label, m, "beam_rate", v)
        report["rates"].append({"policy": p.label, "rate": est.mean, "std_error": est.std_error,
                                "per_beam": est.per_beam_means, "unit": est.unit})
    for a, b in cfg.compare:
        d = difference_estimate(by_label[a], by_label[b], cfg.seed, cfg.log_base)
        long.add(f"{a}-{b}", None, "difference", d.mean)
        long.add(f"{a}-{b}", None, "difference_std_error", d.std_error)
        report["differences"].append({"a": a, "b": b, "difference": d.mean,
                                      "std_error": d.std_error})
    return {"rates.csv": long.to_bytes(), "simulate.json": _json_bytes(report)}, True


def _task_match(cfg):
    long = _Long(cfg)
    report = []
    for p in cfg.policies:
        pair = threshold.match_policy(p, cfg.model, cfg.match.get("kind", "auto"), **_match_kwargs(cfg))
        for i in range(p.n_users):
            long.add(p.label, i, "threshold", pair.thresholds[i])
            long.add(p.label, i, "probability", pair.probabilities[i])
            long.add(p.label, i, "probability_std_error", pair.probability_errors[i])
        long.add(p.label, None, "load_original", pair.load_original)
        long.add(p.label, None, "load_matched", pair.load_matched)
        report.append({"policy": p.label, "kind": pair.kind, "thresholds": pair.thresholds,
                       "probabilities": pair.probabilities, "load_original": pair.load_original,
                       "load_matched": pair.load_matched})
    return {"match.csv": long.to_bytes(), "match.json": _json_bytes(report)}, True


def _task_theorem1(cfg):
    long = _Long(cfg)
    reports = []
    for p in cfg.policies:
        rep = threshold.verify_theorem1(p, cfg.model, cfg.trials, cfg.seed,
                                        kind=cfg.match.get("kind", "auto"),
                                        samples=cfg.match.get("samples", 10**6),
                                        log_base=cfg.log_base)
        reports.append(rep.to_dict())
        long.add(p.label, None, "rate_difference", rep.difference.mean)
        long.add(p.label, None, "std_error", rep.difference.std_error)
        long.add(p.label, None, "load_original", rep.load_original)
        long.add(p.label, None, "load_switched", rep.load_switched)
        long.add(p.label, None, "passed", int(rep.passed))
    passed = all(r["passed"] for r in reports)
    out = {"passed": passed, "cases": len(reports), "reports": reports}
    return {"theorem1.csv": long.to_bytes(), "theorem1.json": _json_bytes(out)}, passed


def _task_chain(cfg):
    long = _Long(cfg)
    reports = []
    for p in cfg.policies:
        rep = threshold.verify_monotone_chain(p, cfg.model, cfg.trials, cfg.seed,
                                              kind=cfg.match.get("kind", "auto"),
                                              samples=cfg.match.get("samples", 10**6),
                                              log_base=cfg.log_base, jobs=cfg.jobs)
        reports.append(rep.to_dict())
        for k, r in enumerate(rep.rates):
            long.add(p.label, k, "rate", r)
            long.add(p.label, k, "load", rep.loads[k])
        for k, d in enumerate(rep.differences):
            long.add(p.label, k + 1, "step_difference", d.mean)
            long.add(p.label, k + 1, "step_std_error", d.std_error)
        long.add(p.label, None, "passed", int(rep.passed))
    passed = all(r["passed"] for r in reports)
    out = {"passed": passed, "cases": len(reports), "reports": reports}
    return {"chain.csv": long.to_bytes(), "chain.json": _json_bytes(out)}, passed


def _task_events(cfg):
    long = _Long(cfg)
    reports = []
    passed = True
    for p in cfg.policies:
        pair = threshold.match_policy(p, cfg.model, cfg.match.get("kind", "auto"), **_match_kwargs(cfg))
        stats = threshold.event_statistics(pair, cfg.model, cfg.trials, cfg.seed)
        balance = threshold.mass_balance(pair, cfg.model, cfg.trials, cfg.seed)
        ok = stats["agreement"] == 1.0 and all(b["ok"] for b in balance)
        passed &= ok
        long.add(p.label, None, "agreement", stats["agreement"])
        for cls, freq in sorted(stats["frequencies"].items()):
            long.add(p.label, None, f"frequency_{cls}", freq)
        for b in balance:
            long.add(p.label, b["user"], "mass_difference", b["difference"])
            long.add(p.label, b["user"], "mass_std_error", b["std_error"])
        reports.append({"policy": p.label, "events": stats, "mass_balance": balance, "passed": ok})
    out = {"passed": passed, "cases": len(reports), "reports": reports}
    return {"events.csv": long.to_bytes(), "events.json": _json_bytes(out)}, passed


def _task_optimize(cfg):
    opt = cfg.optimize
    method = opt.get("method", "coordinate")
    kind = opt.get("policy_kind", "gtfp")
    orc = optimizer.RateOracle(cfg.model, kind, cfg.trials, cfg.seed, cfg.log_base, cfg.jobs)
    common = {"kind": kind, "oracle": orc}
    if method == "homogeneous":
        res = optimizer.homogeneous_search(cfg.model, cfg.budget, tol=opt.get("tol", 1e-3), **common)
    elif method == "coordinate":
        res = optimizer.coordinate_ascent(
            cfg.model, cfg.budget, init=opt.get("init"), starts=opt.get("starts", 4),
            max_cycles=opt.get("max_cycles", 20), tol=opt.get("tol", 1e-3), seed=cfg.seed, **common)
    else:
        res = optimizer.simplex_grid(cfg.model, cfg.budget, resolution=opt.get("resolution", 0.02),
                                     symmetric=method == "symmetric-grid", **common)
    n = cfg.model.n_users
    prefix = [cfg.config_hash, cfg.seed]
    header = (["config_hash", "seed", "iteration"] + [f"p{i}" for i in range(n)]
              + [f"tau{i}" for i in range(n)] + ["rate", "std_error"])
    trace = [prefix + [r[k] for k in header[2:]] for r in res.trace_rows()]
    outputs = {"trace.csv": _csv_bytes(header, trace)}
    if res.surface is not None:
        sheader = ["config_hash", "seed", "point", "coordinate", "metric", "value"]
        rows = []
        for j, (probs, est) in enumerate(res.surface):
            for i, p in enumerate(probs):
                rows.append(prefix + [j, i, "p", p])
            rows.append(prefix + [j, "", "rate", est.mean])
            rows.append(prefix + [j, "", "std_error", est.std_error])
        outputs["surface.csv"] = _csv_bytes(sheader, rows)
    outputs["optimize.json"] = _json_bytes({
        "method": res.method, "policy_kind": kind, "budget": cfg.budget,
        "probabilities": res.best.probs, "thresholds": res.best.taus, "rate": res.rate.mean,
        "std_error": res.rate.std_error, "unit": res.rate.unit, "iterations": res.iterations,
        "oracle_calls": res.oracle_calls,
    })
    return outputs, True


_DISPATCH = {
    "simulate": _task_simulate,
    "match": _task_match,
    "verify-theorem1": _task_theorem1,
    "verify-chain": _task_chain,
    "classify-events": _task_events,
    "optimize": _task_optimize,
}


def run(config):
    """Execute the config's task and return its outputs in memory."""
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    outputs, passed = _DISPATCH[config.task](config)
    outputs["config.json"] = _json_bytes({k: v for k, v in config.raw.items() if k not in UNHASHED})
    manifest = {
        "config_hash": config.config_hash,
        "seed": config.seed,
        "task": config.task,
        "package_version": __version__,
        "status": "PASS" if passed else "FAIL",
        "files": {name: hashlib.sha256(data).hexdigest() for name, data in sorted(outputs.items())},
    }
    outputs["manifest.json"] = _json_bytes(manifest)
    return ResultBundle(config.config_hash, config.seed, config.task, outputs, passed)


def _atomic_write(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bundle(bundle, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    # manifest last so its presence marks a complete bundle
    names = sorted(n for n in bundle.outputs if n != "manifest.json") + ["manifest.json"]
    paths = []
    for name in names:
        path = os.path.join(out_dir, name)
        _atomic_write(path, bundle.outputs[name])
        paths.append(path)
    return paths


def _apply_overrides(config, args):
    config = dict(config)
    for key in ("seed", "trials", "jobs", "log_base"):
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    return config


def _parser():
    ap = argparse.ArgumentParser(prog="threshfeed", description="Threshold feedback experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run", "validate"):
        p = sub.add_parser(name)
        p.add_argument("config", help="YAML experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--trials", type=int)
        p.add_argument("--log-base", dest="log_base", choices=("nats", "bits"))
        p.add_argument("--jobs", type=int, help="worker threads; results do not depend on it")
        if name == "run":
            p.add_argument("--out", help="output directory (default: config 'out' or ./results)")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        config = _apply_overrides(load_config(args.config), args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    diags = validate(config)
    if args.command == "validate":
        for d in diags:
            print(d)
        return EXIT_CONFIG if diags else EXIT_OK
    if diags:
        for d in diags:
            print(f"config error: {d}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        bundle = run(config)
    except (ConfigurationError, DomainError, PolicyKindError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = args.out or config.get("out") or "results"
    try:
        write_bundle(bundle, out_dir)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"{bundle.task}: {'PASS' if bundle.passed else 'FAIL'} "
          f"(config {bundle.config_hash}, seed {bundle.seed}) -> {out_dir}")
    return bundle.exit_code


if __name__ == "__main__":
    sys.exit(main())
