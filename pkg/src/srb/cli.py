"""Command-line front end: ``srb simulate|estimate|check-unbiased|stability -c cfg``.

The configuration file (YAML or JSON) holds every setting; command-line
flags override it. Exit status is 0 on success, 1 on invalid input and 2
when ``check-unbiased`` finds a failing instance.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .core import Population, PopulationError, load_population
from .designs import DesignError, DesignSpec, SampleDraw, SubsampleSpec, draw_sample, sample_from_indices
from .estimators import ContractViolation
from .learners import LearnerSpec
from .rng import stream
from .simulation import (
    EstimatorConfig,
    ScenarioSpec,
    config_fingerprint,
    evaluate,
    exhaustive_expectation,
    generate_scenario,
    run_study,
    variance_decomposition,
)
from .stability import CONDITIONS, stability_trace, write_traces

COMMANDS = ("simulate", "estimate", "check-unbiased", "stability")
EXIT_OK, EXIT_INVALID, EXIT_CHECK_FAILED = 0, 1, 2


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


def _build(cls, data, key: str, extra_ok=()):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{key}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names - set(extra_ok))
    if unknown:
        raise ConfigError(f"unknown key '{key}.{unknown[0]}' (allowed: {', '.join(sorted(names))})")
    try:
        return cls(**{k: v for k, v in data.items() if k in names})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


@dataclass
class StabilityConfig:
    sizes: list = field(default_factory=lambda: [50, 100, 200, 400])
    replicates: int = 50
    conditions: list = field(default_factory=lambda: ["q", "p", "loo-consistency"])
    pair_cap: int = 200


@dataclass
class CheckInstance:
    N: int = 8
    n: int = 4
    design: str = "srs"
    scheme: str = "delete-one"
    n1: int | None = None
    learner: str = "wls"
    seed: int = 0


@dataclass
class RunConfig:
    command: str = "simulate"
    seed: int = 0
    B: int = 500
    K: int = 100
    threads: int = 1
    output: str = "srb-out"
    target: str = "mean"
    scenario: ScenarioSpec | None = None
    population: str | None = None
    sample: str | None = None
    design: DesignSpec | None = None
    scheme: SubsampleSpec = field(default_factory=SubsampleSpec)
    learner: LearnerSpec = field(default_factory=LearnerSpec)
    estimators: list = field(default_factory=list)
    stability: StabilityConfig = field(default_factory=StabilityConfig)
    check: list = field(default_factory=list)
    tolerance: float = 1e-9

    def canonical(self) -> dict:
        """Everything that determines results (threads and output excluded)."""
        d = asdict(self)
        d.pop("threads")
        d.pop("output")
        return d


_TOP_KEYS = {f.name for f in fields(RunConfig)}


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a mapping")
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}' (allowed: {', '.join(sorted(_TOP_KEYS))})")
    cfg = RunConfig()
    for k in ("command", "seed", "B", "K", "threads", "output", "target", "population", "sample",
              "tolerance"):
        if k in raw and raw[k] is not None:
            setattr(cfg, k, raw[k])
    if cfg.command not in COMMANDS:
        raise ConfigError(f"command must be one of {COMMANDS}, got {cfg.command!r}")
    for k in ("seed", "B", "K", "threads"):
        v = getattr(cfg, k)
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{k} must be an integer, got {v!r}")
    if cfg.seed < 0:
        raise ConfigError("seed must be >= 0")
    if cfg.B < 2:
        raise ConfigError(f"B must be >= 2, got {cfg.B}")
    if cfg.K < 1:
        raise ConfigError(f"K must be >= 1, got {cfg.K}")
    if cfg.threads < 1:
        raise ConfigError(f"threads must be >= 1, got {cfg.threads}")
    if cfg.target not in ("mean", "total"):
        raise ConfigError("target must be 'mean' or 'total'")
    if "scenario" in raw:
        cfg.scenario = _build(ScenarioSpec, raw["scenario"], "scenario")
    if "design" in raw:
        d = dict(raw["design"] or {})
        if "allocation" in d and d["allocation"] is not None:
            d["allocation"] = tuple(d["allocation"])
        cfg.design = _build(DesignSpec, d, "design")
    if "scheme" in raw:
        cfg.scheme = _build(SubsampleSpec, raw["scheme"], "scheme")
    if "learner" in raw:
        cfg.learner = _learner(raw["learner"], "learner")
    elif cfg.scenario is not None and cfg.scenario.name == "S2":
        # n=5 delete-one folds leave 4 points: intercept plus two slopes is near-singular
        cfg.learner = LearnerSpec("wls", intercept=False)
    if "estimators" in raw:
        if not isinstance(raw["estimators"], list):
            raise ConfigError("estimators: expected a list")
        cfg.estimators = [_estimator(e, i, cfg) for i, e in enumerate(raw["estimators"])]
    if "stability" in raw:
        cfg.stability = _build(StabilityConfig, raw["stability"], "stability")
        bad = [c for c in cfg.stability.conditions if c not in CONDITIONS]
        if bad:
            raise ConfigError(f"stability.conditions: unknown condition {bad[0]!r}")
        if cfg.stability.replicates < 1:
            raise ConfigError("stability.replicates must be >= 1")
    if "check" in raw:
        if not isinstance(raw["check"], list):
            raise ConfigError("check: expected a list of instances")
        cfg.check = [_build(CheckInstance, c, f"check[{i}]") for i, c in enumerate(raw["check"])]
    return cfg


def _learner(data, key: str) -> LearnerSpec:
    if isinstance(data, dict) and isinstance(data.get("features"), list):
        data = {**data, "features": tuple(data["features"])}
    return _build(LearnerSpec, data, key)


def _estimator(data, i: int, cfg: RunConfig) -> EstimatorConfig:
    key = f"estimators[{i}]"
    if not isinstance(data, dict):
        raise ConfigError(f"{key}: expected a mapping")
    data = dict(data)
    if "name" not in data:
        data["name"] = data.get("kind", f"estimator{i}")
    learner = _learner(data.pop("learner"), key + ".learner") if "learner" in data else cfg.learner
    scheme = _build(SubsampleSpec, data.pop("scheme"), key + ".scheme") if "scheme" in data else cfg.scheme
    data.setdefault("K", cfg.K)
    est = _build(EstimatorConfig, {**data, "learner": learner, "scheme": scheme}, key)
    return est


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = p.read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return raw or {}


# ---------------------------------------------------------------------------
# commands

def _population(cfg: RunConfig) -> Population:
    if cfg.population:
        if not Path(cfg.population).exists():
            raise ConfigError(f"population file {cfg.population} does not exist")
        return load_population(cfg.population)
    if cfg.scenario is None:
        raise ConfigError("one of 'population' or 'scenario' is required")
    return generate_scenario(cfg.scenario)


def _design(cfg: RunConfig, pop: Population) -> DesignSpec:
    if cfg.design is None:
        raise ConfigError("'design' is required")
    cfg.design.validate(pop)
    return cfg.design


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_plain)
        fh.write("\n")


def _plain(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def cmd_simulate(cfg: RunConfig, out: Path, fp: str) -> int:
    pop = _population(cfg)
    design = _design(cfg, pop)
    if not cfg.estimators:
        raise ConfigError("estimators: at least one estimator is required")
    rep = run_study(pop, design, cfg.estimators, B=cfg.B, seed=cfg.seed, threads=cfg.threads,
                    target=cfg.target)
    rep.fingerprint = fp
    rep.to_csv(out / "study.csv")
    rep.to_json(out / "study.json")
    rep.to_replicates_csv(out / "replicates.csv")
    return EXIT_OK


def _read_sample(path: str, pop: Population, design: DesignSpec) -> SampleDraw:
    if not Path(path).exists():
        raise ConfigError(f"sample file {path} does not exist")
    ids = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if "id" not in header:
            raise ConfigError(f"sample file {path}: missing column 'id'")
        col = header.index("id")
        for r, line in enumerate(fh, start=2):
            if line.strip():
                try:
                    ids.append(int(line.split(",")[col]))
                except ValueError:
                    raise ConfigError(f"sample file {path}: row {r}, column 'id' is not an integer") from None
    pos = {int(v): k for k, v in enumerate(pop.ids)}
    missing = [i for i in ids if i not in pos]
    if missing:
        raise ConfigError(f"sample file {path}: id {missing[0]} not in population")
    idx = np.sort(np.array([pos[i] for i in ids], dtype=np.int64))
    if len(np.unique(idx)) != len(idx):
        raise ConfigError(f"sample file {path}: duplicate ids")
    return sample_from_indices(pop, design, idx)


def cmd_estimate(cfg: RunConfig, out: Path, fp: str) -> int:
    pop = _population(cfg)
    design = _design(cfg, pop)
    if cfg.sample:
        sample = _read_sample(cfg.sample, pop, design)
    else:
        sample = draw_sample(pop, design, stream(cfg.seed, "sample", 0))
    ests = cfg.estimators or [EstimatorConfig("rb_loo", "rb_loo", cfg.learner, variance="jackknife")]
    results = {}
    for e in ests:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rep = evaluate(e, sample, pop, stream(cfg.seed, "estimator:" + e.name, 0))
        results[e.name] = rep.to_dict()
    _write_json(out / "estimate.json", {
        "config_fingerprint": fp, "seed": cfg.seed, "N": pop.N, "n": sample.n,
        "sample_ids": [int(pop.ids[i]) for i in sample.indices], "estimates": results,
    })
    return EXIT_OK


def _check_rows(inst: CheckInstance, tol: float) -> list[dict]:
    from .estimators import fit_split, rb_exact, y1

    pop = generate_scenario(ScenarioSpec("S1", N=inst.N, seed=inst.seed))
    if inst.design == "stratified":
        labels = np.arange(inst.N) % 2
        pop = Population(pop.ids, pop.y, pop.x, labels)
    design = DesignSpec(inst.design, inst.n)
    design.validate(pop)
    scheme = SubsampleSpec(inst.scheme, inst.n1)
    learner = LearnerSpec(inst.learner)
    Y = pop.Y
    rows = []

    def add(check, value, target, rtol):
        err = abs(value - target) / max(abs(target), 1e-300)
        rows.append({"instance": f"N={inst.N},n={inst.n},{inst.design},{inst.scheme}"
                                 + (f",n1={inst.n1}" if inst.n1 else "") + f",{inst.learner}",
                     "check": check, "value": value, "target": target, "rel_error": err,
                     "tolerance": rtol, "passed": bool(err <= rtol)})

    if inst.design != "stratified":
        def one(sample, sp):
            return y1(sp, fit_split(sp, pop, learner), pop)
        E, _ = exhaustive_expectation(pop, design, one, scheme=scheme)
        add("E[y1] = Y", E, Y, tol)
    E, _ = exhaustive_expectation(pop, design, lambda s: rb_exact(s, scheme, learner, pop)[0].point)
    add("E[rb_exact] = Y", E, Y, tol)
    if inst.design != "stratified":
        dec = variance_decomposition(pop, design, scheme, learner)
        add("V[rb_exact] = E1V2 - EpVq", dec.E1_V2 - dec.Ep_Vq, dec.V_rb, tol)
    return rows


def cmd_check(cfg: RunConfig, out: Path, fp: str) -> int:
    instances = cfg.check or [CheckInstance()]
    rows = []
    for inst in instances:
        rows.extend(_check_rows(inst, cfg.tolerance))
    cols = ("instance", "check", "value", "target", "rel_error", "tolerance", "passed")
    with open(out / "check.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_fingerprint={fp}\n# seed={cfg.seed}\n")
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(f'"{r[c]}"' if c == "instance" else
                              (repr(r[c]) if isinstance(r[c], float) else str(r[c])) for c in cols) + "\n")
    ok = all(r["passed"] for r in rows)
    _write_json(out / "check.json", {"config_fingerprint": fp, "seed": cfg.seed,
                                     "passed": ok, "rows": rows})
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['instance']}  {r['check']}  "
              f"rel_error={r['rel_error']:.2e}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_stability(cfg: RunConfig, out: Path, fp: str) -> int:
    pop = _population(cfg)
    design = cfg.design or DesignSpec("srs", min(cfg.stability.sizes))
    st = cfg.stability
    traces = stability_trace(pop, design, cfg.learner, st.sizes, st.replicates, cfg.seed,
                             tuple(st.conditions), st.pair_cap)
    write_traces(traces, out / "stability.csv", out / "stability.json", fp, cfg.seed)
    return EXIT_OK


HANDLERS = {"simulate": cmd_simulate, "estimate": cmd_estimate,
            "check-unbiased": cmd_check, "stability": cmd_stability}


def run(cfg: RunConfig) -> int:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    fp = config_fingerprint(cfg.canonical())
    return HANDLERS[cfg.command](cfg, out, fp)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="srb", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="YAML or JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--B", type=int, dest="B")
        p.add_argument("--K", type=int, dest="K")
        p.add_argument("--threads", type=int,
                       help="worker threads (default: $SRB_THREADS or 1); results do not depend on it")
        p.add_argument("-o", "--output", help="output directory")
        p.add_argument("--population", help="population CSV (overrides scenario)")
        p.add_argument("--sample", help="CSV with an 'id' column listing the sampled units")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = load_config(args.config) if args.config else {}
        raw = dict(raw)
        raw["command"] = args.command
        if "threads" not in raw and os.environ.get("SRB_THREADS"):
            try:
                raw["threads"] = int(os.environ["SRB_THREADS"])
            except ValueError:
                raise ConfigError("SRB_THREADS must be an integer") from None
        for k in ("seed", "B", "K", "threads", "output", "population", "sample"):
            v = getattr(args, k)
            if v is not None:
                raw[k] = v
        cfg = parse_config(raw)
        return run(cfg)
    except (ConfigError, PopulationError, DesignError, ContractViolation, ValueError, OSError) as exc:
        print(f"srb: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
