import csv
import json
import os

import pytest
from click.testing import CliRunner

from superexit.harness import RunConfig, RunManifest, suite_identities
from superexit.harness.cli import main


class TestRunConfig:
    def test_defaults_merged(self):
        cfg = RunConfig({"replicas": 500})
        assert cfg["replicas"] == 500
        assert cfg["K"] == 100
        assert cfg["domain"]["kind"] == "ball"

    def test_hash_deterministic_and_order_free(self):
        a = RunConfig({"replicas": 500, "seed": 3})
        b = RunConfig({"seed": 3, "replicas": 500})
        assert a.hash() == b.hash()
        c = RunConfig({"replicas": 501, "seed": 3})
        assert a.hash() != c.hash()

    def test_seed_required(self):
        with pytest.raises(ValueError):
            RunConfig({"seed": None})

    def test_bad_tolerance_rejected(self):
        with pytest.raises(ValueError):
            RunConfig({"tolerances": {"calibration": -1.0}})

    def test_from_file(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"seed": 9, "K": 40}))
        cfg = RunConfig.from_file(str(p))
        assert cfg["seed"] == 9
        assert cfg["K"] == 40


class TestRunManifest:
    def test_rows_and_all_passed(self):
        man = RunManifest("abc")
        man.add("one", True, seed=1, seconds=0.1, value=1.0)
        assert man.all_passed
        man.add("two", False, seed=2)
        assert not man.all_passed

    def test_save_and_csv(self, tmp_path):
        man = RunManifest("abc")
        man.add("one", True, seed=1, value=2.0, bound=2.1, zscore=-0.5)
        man.close()
        jp = str(tmp_path / "m.json")
        cp = str(tmp_path / "m.csv")
        man.save(jp)
        man.write_csv(cp)
        loaded = json.loads(open(jp).read())
        assert loaded["config_hash"] == "abc"
        assert loaded["results"][0]["check"] == "one"
        assert loaded["finished"] is not None
        with open(cp) as f:
            rows = list(csv.DictReader(f))
        assert rows[0]["check"] == "one"
        assert rows[0]["config_hash"] == "abc"
        assert not any(p.endswith(".tmp") for p in os.listdir(tmp_path))


class TestIdentitySuite:
    def test_all_identities_pass(self):
        man = suite_identities(RunConfig({}))
        assert man.all_passed
        names = [r["check"] for r in man.results]
        assert len(names) == len(set(names))
        assert len(names) >= 5

    def test_fault_injection_is_caught(self):
        man = suite_identities(RunConfig({}), fault="transform")
        assert not man.all_passed
        bad = [r for r in man.results if not r["passed"]]
        assert any("transform" in r["check"] or "round" in r["check"]
                   for r in bad)


class TestCli:
    def test_mech_eval_runs(self):
        r = CliRunner().invoke(main, ["mech", "eval", "--lam", "1.0"])
        assert r.exit_code == 0
        assert "psi(1)" in r.output

    def test_verify_identities_writes_artifacts(self, tmp_path):
        out = str(tmp_path / "res")
        r = CliRunner().invoke(main, ["--out", out, "verify", "identities"])
        assert r.exit_code == 0, r.output
        assert os.path.exists(os.path.join(out, "identities.json"))
        assert os.path.exists(os.path.join(out, "identities.csv"))
        assert "pass" in r.output

    def test_fault_gives_exit_one(self, tmp_path):
        out = str(tmp_path / "res")
        r = CliRunner().invoke(main, ["--out", out, "verify", "identities",
                                      "--fault", "transform"])
        assert r.exit_code == 1
        assert "FAIL" in r.output

    def test_bad_config_gives_exit_two(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        r = CliRunner().invoke(main, ["--config", str(p), "mech", "eval"])
        assert r.exit_code == 2

    def test_json_output_mode(self):
        r = CliRunner().invoke(main, ["--json", "mech", "derive",
                                      "--orders", "3"])
        assert r.exit_code == 0
        payload = json.loads(r.output)
        assert any(k.startswith("b(") for k in payload)

    def test_seed_override_changes_samples(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"mechanism": {"kind": "tempered",
                                               "beta": 0.5, "gamma": 1.0}}))
        args = ["--config", str(p), "mech", "sample", "--j", "2",
                "--u", "0.5"]
        r1 = CliRunner().invoke(main, ["--seed", "1"] + args)
        r2 = CliRunner().invoke(main, ["--seed", "2"] + args)
        r1b = CliRunner().invoke(main, ["--seed", "1"] + args)
        assert r1.output == r1b.output
        assert r1.output != r2.output
