import json
import math
from importlib import resources

import httpx
import numpy as np
import pytest
from fastapi.testclient import TestClient

from phaseplane import cli
from phaseplane.config import load_config
from phaseplane.errors import StageFailed
from phaseplane.pipeline import report_diff, run_pipeline, stage_whitney
from phaseplane.service import app
from phaseplane.sweeps import parse_values, slope, sweep_csv
from phaseplane.modelform import FormResult

MINI = {"whitney": {"j_range": [3, 3], "center_tau": [0.1]}, "tiles": {"max_tiles": 60}}
SMALL = dict(MINI, stages=["whitney", "packets", "tiles", "select", "form", "sweep"], sweep={"values": [1, 2, 4]})


def write(tmp_path, name, data):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def remote(monkeypatch):
    """Route ``--server`` requests to the in-process app."""
    monkeypatch.setattr(httpx, "Client", lambda base_url, timeout=None: TestClient(app, base_url=base_url))
    return "http://testserver"


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    cfg = write(root, "cfg.json", SMALL)
    assert cli.main(["report", "--config", cfg, "--out", str(root / "a")]) == 0
    return root, cfg


class TestPipeline:
    def test_minimal_whitney(self, tmp_path):
        cfg = write(tmp_path, "cfg.json", MINI)
        assert cli.main(["report", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
        rep = json.loads((tmp_path / "r" / "report.json").read_text())
        assert rep["ok"] and list(rep["stages"]) == ["whitney"]
        assert rep["stages"]["whitney"]["summary"]["members"] == 150
        assert (tmp_path / "r" / "family_stats.csv").read_text().startswith("kind,key,value\n")
        assert "timing" not in rep

    def test_all_stages_pass(self, small_run):
        root, _ = small_run
        rep = json.loads((root / "a" / "report.json").read_text())
        assert rep["ok"] and all(rep["checks"].values())
        assert set(rep["stages"]) == set(SMALL["stages"])

    def test_report_deterministic(self, small_run):
        root, cfg = small_run
        assert cli.main(["report", "--config", cfg, "--out", str(root / "b")]) == 0
        assert tree_bytes(root / "a") == tree_bytes(root / "b")

    def test_run_id_and_hash(self):
        cfg = load_config(dict(MINI, seed=9))
        report, artifacts, timing = run_pipeline(cfg)
        assert report.run_id == f"{cfg.config_hash()[:12]}-9"
        assert set(timing) == {"whitney"} and "report.json" in artifacts

    def test_golden_report(self):
        data = resources.files("phaseplane").joinpath("data")
        cfg = load_config(json.loads(data.joinpath("reference_d1.json").read_text()))
        report, _, _ = run_pipeline(cfg)
        want = json.loads(data.joinpath("golden_d1.json").read_text())
        assert report_diff(json.loads(report.to_json()), want) == []

    def test_report_diff_flags_changes(self):
        a = {"version": "x", "stages": {"s": {"summary": {"v": 1.0, "k": "a"}}}}
        b = json.loads(json.dumps(a))
        b["version"] = "y"
        assert report_diff(b, a) == []
        b["stages"]["s"]["summary"]["v"] = 1.0 + 1e-6
        b["stages"]["s"]["summary"]["k"] = "b"
        assert len(report_diff(b, a)) == 2

    def test_stage_failure_wrapped(self):
        cfg = load_config({"whitney": {"j_range": [3, 3]}, "grid": {"m": 8}, "stages": ["packets"]})
        with pytest.raises(StageFailed) as e:
            run_pipeline(cfg)
        assert e.value.stage == "packets"

    def test_whitney_stage_artifacts(self):
        out = stage_whitney(load_config(MINI))
        fam = json.loads(out.artifacts["family.json"])
        assert len(fam["members"]) == 150 and {"xi", "j"} <= set(fam["members"][0])
        assert all(out.checks.values())


class TestCommands:
    def test_every_command_deterministic(self, tmp_path, small_run):
        root, cfg = small_run
        tiles = root / "a" / "tiles.json"
        fields = [str(root / "a" / f"f{n}.bin") for n in (1, 2, 3)]
        spec = write(tmp_path, "spec.json", {"kind": "PHI", "n": 0, "xi": [[0.0], [0.0], [0.0]], "j": 0,
                                             "alpha": 2.5, "v": [-1]})
        for rep in ("x", "y"):
            d = tmp_path / rep
            cmds = [
                ["whitney", "--config", cfg, "--out", f"{d}/family.json"],
                ["tiles", "build", "--config", cfg, "--out", f"{d}/tiles.json"],
                ["select", "--tiles", str(tiles), "--fields", *fields, "--out", f"{d}/dec.json", "--audit", f"{d}/audit.log"],
                ["form", "eval", "--kind", "bht", "--config", cfg, "--out", f"{d}/bht.json"],
                ["sweep", "--param", "lambda", "--grid", "1,2", "--config", cfg, "--out", f"{d}/sweep.csv"],
                ["packets", "verify", "--spec", spec, "--field", fields[0], "--out", f"{d}/packets.json"],
            ]
            for c in cmds:
                assert cli.main(c) in (0, 1), c
        assert tree_bytes(tmp_path / "x") == tree_bytes(tmp_path / "y")
        assert {"family.json", "family_stats.csv", "tiles.json", "f1.bin", "dec.json", "audit.log", "bht.json",
                "sweep.csv", "packets.json"} <= set(tree_bytes(tmp_path / "x"))

    def test_select_matches_pipeline(self, tmp_path, small_run):
        root, _ = small_run
        fields = [str(root / "a" / f"f{n}.bin") for n in (1, 2, 3)]
        cli.main(["select", "--tiles", str(root / "a" / "tiles.json"), "--fields", *fields,
                  "--out", str(tmp_path / "decomposition.json")])
        assert (tmp_path / "decomposition.json").read_bytes() == (root / "a" / "decomposition.json").read_bytes()
        assert (tmp_path / "audit.log").read_bytes() == (root / "a" / "audit.log").read_bytes()

    def test_config_invalid_exit(self, tmp_path, capsys):
        cfg = write(tmp_path, "bad.json", {"exponents": [3, 3, 4]})
        assert cli.main(["whitney", "--config", cfg, "--out", str(tmp_path / "f.json")]) == cli.EXIT_CONFIG
        assert "sum of 1/p_n" in capsys.readouterr().err

    def test_stage_failed_exit(self, tmp_path, capsys):
        cfg = write(tmp_path, "c.json", MINI)
        assert cli.main(["form", "eval", "--kind", "beurling", "--config", cfg, "--out", str(tmp_path / "r.json")]) == 3
        assert "form" in capsys.readouterr().err

    def test_check_failure_exit(self, tmp_path, small_run):
        root, _ = small_run
        spec = write(tmp_path, "spec.json", {"kind": "PHI", "n": 0, "xi": [[9.0], [9.0], [-18.0]], "j": 4,
                                             "alpha": 2.5, "v": [-1]})
        assert cli.main(["packets", "verify", "--spec", spec, "--field", str(root / "a" / "f1.bin"),
                         "--out", str(tmp_path / "p.json")]) == cli.EXIT_CHECK

    def test_seed_changes_fields(self, tmp_path):
        cfg = write(tmp_path, "c.json", MINI)
        for seed in (1, 2):
            cli.main(["tiles", "build", "--config", cfg, "--seed", str(seed), "--out", str(tmp_path / f"s{seed}/t.json")])
        assert (tmp_path / "s1/f1.bin").read_bytes() != (tmp_path / "s2/f1.bin").read_bytes()


class TestService:
    def test_health(self):
        r = TestClient(app).get("/health")
        assert r.status_code == 200 and r.json()["status"] == "ok"

    def test_errors(self):
        c = TestClient(app)
        r = c.post("/whitney", json={"config": {"alpha": 9.0}})
        assert r.status_code == 422 and r.json()["detail"]["error"] == "ConfigInvalid"
        r = c.post("/form/eval", json={"config": MINI, "kind": "beurling"})
        assert r.status_code == 500 and r.json()["detail"]["error"] == "StageFailed"
        r = c.post("/sweep", json={"config": MINI, "param": "speed", "values": [1]})
        assert r.status_code == 422

    def test_remote_matches_local(self, tmp_path, small_run, remote):
        root, cfg = small_run
        fields = [str(root / "a" / f"f{n}.bin") for n in (1, 2, 3)]
        for where, extra in (("local", []), ("remote", ["--server", remote])):
            d = tmp_path / where
            assert cli.main(["whitney", "--config", cfg, "--out", f"{d}/family.json", *extra]) == 0
            assert cli.main(["tiles", "build", "--config", cfg, "--out", f"{d}/tiles.json", *extra]) == 0
            assert cli.main(["select", "--tiles", str(root / "a" / "tiles.json"), "--fields", *fields,
                             "--out", f"{d}/dec.json", *extra]) == 0
            assert cli.main(["sweep", "--param", "lambda", "--grid", "1,2", "--config", cfg,
                             "--out", f"{d}/sweep.csv", *extra]) == 0
        assert tree_bytes(tmp_path / "local") == tree_bytes(tmp_path / "remote")

    def test_remote_errors(self, tmp_path, remote):
        bad = write(tmp_path, "bad.json", {"dilation": {"k0": 3, "k1": 3}})
        assert cli.main(["whitney", "--config", bad, "--out", str(tmp_path / "f.json"), "--server", remote]) == 2
        ok = write(tmp_path, "ok.json", MINI)
        assert cli.main(["form", "eval", "--kind", "beurling", "--config", ok, "--out", str(tmp_path / "r.json"),
                         "--server", remote]) == 3


def _row(ratio):
    return FormResult(complex(ratio, 0.0), (1.0, 1.0, 1.0), ratio, provenance="test")


class TestSweepTable:
    def test_parse_values(self):
        assert parse_values("2^0..2^3") == [1.0, 2.0, 4.0, 8.0]
        assert parse_values("1..3") == [1.0, 2.0, 3.0]
        assert parse_values("0,pi/8,pi/4") == [0.0, math.pi / 8, math.pi / 4]
        assert parse_values("2^-1, 3") == [0.5, 3.0]

    def test_single_value_na(self):
        text = sweep_csv("lambda", [2.0], [_row(0.5)])
        lines = text.strip().splitlines()
        assert lines[0] == "lambda,value_re,value_im,norms,ratio"
        assert len(lines) == 3 and lines[-1] == "slope,,,,NA"

    def test_slope_fit(self):
        lam = [2.0**k for k in range(6)]
        text = sweep_csv("lambda", lam, [_row(3.0 * x**0.25) for x in lam])
        assert float(text.strip().splitlines()[-1].split(",")[-1]) == pytest.approx(0.25, rel=1e-12)
        th = [0.0, 0.1, 0.2]
        text = sweep_csv("theta", th, [_row(math.exp(2 * t)) for t in th])
        assert float(text.strip().splitlines()[-1].split(",")[-1]) == pytest.approx(2.0, rel=1e-12)
        assert sweep_csv("M", [[1, 1, -2], [1, 0, -1]], [_row(1.0), _row(2.0)]).endswith("slope,,,,NA\n")

    def test_slope_undefined(self):
        assert slope([1.0, 1.0], [1.0, 2.0]) is None
        assert slope([0.0, 1.0], [1.0, 2.0]) is None
        assert slope([1.0, 2.0], [0.0, 2.0]) is None
        assert slope([0.0, 1.0], [1.0, np.e], log_x=False) == pytest.approx(1.0)

    def test_single_value_cli(self, tmp_path):
        cfg = write(tmp_path, "c.json", MINI)
        assert cli.main(["sweep", "--param", "lambda", "--grid", "4", "--config", cfg, "--out", str(tmp_path / "s.csv")]) == 0
        lines = (tmp_path / "s.csv").read_text().strip().splitlines()
        assert len(lines) == 3 and lines[1].startswith("4.0,") and lines[-1] == "slope,,,,NA"
