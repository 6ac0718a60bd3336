import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from srb.cli import ConfigError, main, parse_config
from srb.core import save_population
from conftest import linear_population

SIM = {
    "scenario": {"name": "S1", "seed": 0},
    "design": {"kind": "srs", "n": 20},
    "B": 30,
    "seed": 11,
    "estimators": [
        {"name": "ht", "kind": "ht"},
        {"name": "greg", "kind": "greg"},
        {"name": "rb_loo", "kind": "rb_loo", "variance": "jackknife"},
    ],
}


def write_cfg(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data) if name.endswith(".yaml") else json.dumps(data))
    return str(p)


def test_check_unbiased_passes(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"check": [{"N": 8, "n": 4, "scheme": "delete-one", "learner": "wls"}]})
    out = tmp_path / "out"
    assert main(["check-unbiased", "-c", cfg, "-o", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(l.startswith("PASS") for l in lines)
    report = json.loads((out / "check.json").read_text())
    assert report["passed"] and len(report["rows"]) == 3


def test_check_unbiased_default_and_stratified(tmp_path):
    cfg = write_cfg(tmp_path, {"check": [{"N": 8, "n": 4, "design": "stratified"},
                                         {"N": 8, "n": 4, "scheme": "srs", "n1": 2, "learner": "tree"}]})
    assert main(["check-unbiased", "-c", cfg, "-o", str(tmp_path / "o")]) == 0


def test_check_failure_exit_code(tmp_path):
    # a tolerance of zero cannot be met by floating-point enumeration sums
    cfg = write_cfg(tmp_path, {"tolerance": 0.0, "check": [{"N": 8, "n": 4, "seed": 3}]})
    code = main(["check-unbiased", "-c", cfg, "-o", str(tmp_path / "o")])
    rows = json.loads((tmp_path / "o" / "check.json").read_text())["rows"]
    assert code == (0 if all(r["rel_error"] == 0 for r in rows) else 2)


def test_n_exceeds_N(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {**SIM, "design": {"kind": "srs", "n": 500}})
    assert main(["simulate", "-c", cfg, "-o", str(tmp_path / "o")]) == 1
    assert "design.n" in capsys.readouterr().err


@pytest.mark.parametrize("patch, key", [
    ({"scenario": {"name": "S1", "foo": 1}}, "scenario.foo"),
    ({"bogus": 1}, "bogus"),
    ({"design": {"kind": "srs", "n": 20, "size": 3}}, "design.size"),
    ({"estimators": [{"kind": "ht", "colour": 1}]}, "estimators[0].colour"),
])
def test_unknown_keys_rejected(tmp_path, capsys, patch, key):
    cfg = write_cfg(tmp_path, {**SIM, **patch})
    assert main(["simulate", "-c", cfg, "-o", str(tmp_path / "o")]) == 1
    assert key in capsys.readouterr().err


def test_invalid_values_rejected():
    for raw, key in [({"B": 1}, "B"), ({"seed": -1}, "seed"), ({"threads": 0}, "threads"),
                     ({"design": {"kind": "pps", "n": 3}}, "design.kind"),
                     ({"stability": {"conditions": ["z"]}}, "stability.conditions")]:
        with pytest.raises(ConfigError, match=key.replace("[", r"\[").replace(".", r"\.")):
            parse_config({"command": "simulate", **raw})


def test_simulate_byte_identical_and_thread_free(tmp_path):
    cfg = write_cfg(tmp_path, SIM)
    outs = []
    for k, threads in enumerate(["1", "1", "3"]):
        out = tmp_path / f"o{k}"
        assert main(["simulate", "-c", cfg, "-o", str(out), "--threads", threads]) == 0
        outs.append({f: (out / f).read_bytes() for f in ("study.csv", "study.json", "replicates.csv")})
    assert outs[0] == outs[1] == outs[2]


def test_flags_override_config(tmp_path):
    cfg = write_cfg(tmp_path, SIM)
    main(["simulate", "-c", cfg, "-o", str(tmp_path / "a"), "--seed", "12", "--B", "10"])
    summary = json.loads((tmp_path / "a" / "study.json").read_text())
    assert summary["seed"] == 12 and summary["B"] == 10


def test_every_file_carries_fingerprint_and_seed(tmp_path):
    pop_path = tmp_path / "pop.csv"
    save_population(linear_population(60, seed=1, p=2), pop_path)
    before = hashlib.sha256(pop_path.read_bytes()).hexdigest()
    runs = {
        "simulate": SIM,
        "estimate": {"population": str(pop_path), "design": {"kind": "srs", "n": 10}, "seed": 11},
        "check-unbiased": {"seed": 11},
        "stability": {"population": str(pop_path), "seed": 11,
                      "stability": {"sizes": [8, 12], "replicates": 2}},
    }
    for cmd, data in runs.items():
        out = tmp_path / cmd
        assert main([cmd, "-c", write_cfg(tmp_path, data, cmd + ".json"), "-o", str(out)]) == 0
        files = sorted(out.iterdir())
        assert files
        fps = set()
        for f in files:
            text = f.read_text()
            if f.suffix == ".json":
                d = json.loads(text)
                fps.add(d["config_fingerprint"])
                assert d["seed"] == 11
            else:
                head = text.splitlines()[:2]
                assert head[0].startswith("# config_fingerprint=") and head[1] == "# seed=11"
                fps.add(head[0].split("=", 1)[1])
        assert len(fps) == 1, (cmd, fps)
    assert hashlib.sha256(pop_path.read_bytes()).hexdigest() == before


def test_estimate_with_sample_file(tmp_path):
    pop = linear_population(30, seed=2, p=2)
    pop_path = tmp_path / "pop.csv"
    save_population(pop, pop_path)
    ids = [int(i) for i in pop.ids[[1, 4, 7, 9, 15, 20, 22, 28]]]
    (tmp_path / "s.csv").write_text("id\n" + "\n".join(map(str, ids)) + "\n")
    cfg = write_cfg(tmp_path, {"design": {"kind": "srs", "n": 8},
                               "estimators": [{"name": "ht", "kind": "ht"}]})
    assert main(["estimate", "-c", cfg, "--population", str(pop_path), "--sample",
                 str(tmp_path / "s.csv"), "-o", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "estimate.json").read_text())
    assert rep["sample_ids"] == sorted(ids)
    assert rep["estimates"]["ht"]["point"] == pytest.approx(30 / 8 * pop.y[[1, 4, 7, 9, 15, 20, 22, 28]].sum())


def test_estimate_rejects_wrong_sample_size(tmp_path, capsys):
    pop_path = tmp_path / "pop.csv"
    save_population(linear_population(30, seed=2), pop_path)
    (tmp_path / "s.csv").write_text("id\n1\n2\n")
    cfg = write_cfg(tmp_path, {"design": {"kind": "srs", "n": 8}})
    assert main(["estimate", "-c", cfg, "--population", str(pop_path), "--sample",
                 str(tmp_path / "s.csv"), "-o", str(tmp_path / "o")]) == 1
    assert "design.n" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["simulate", "-c", str(tmp_path / "nope.yaml")]) == 1
    assert "does not exist" in capsys.readouterr().err


def test_threads_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv("SRB_THREADS", "2")
    cfg = write_cfg(tmp_path, {**SIM, "B": 5})
    assert main(["simulate", "-c", cfg, "-o", str(tmp_path / "o")]) == 0
    monkeypatch.setenv("SRB_THREADS", "two")
    assert main(["simulate", "-c", cfg, "-o", str(tmp_path / "p")]) == 1


def test_console_entry_point(tmp_path):
    cfg = write_cfg(tmp_path, {"check": [{"N": 6, "n": 3}]})
    res = subprocess.run([sys.executable, "-m", "srb.cli", "check-unbiased", "-c", cfg,
                          "-o", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "PASS" in res.stdout


def test_s2_default_learner_has_no_intercept():
    cfg = parse_config({"command": "simulate", "scenario": {"name": "S2"},
                        "estimators": [{"kind": "rb_loo"}]})
    assert cfg.learner.intercept is False and cfg.estimators[0].learner.intercept is False
    cfg = parse_config({"command": "simulate", "scenario": {"name": "S1"}})
    assert cfg.learner.intercept is True
