import json

import pytest

from artifact import cli, harness as h

FAST = ["hk", "viscous-drift", "selfsim"]


def _plan(tmp_path, **kw):
    d = {"studies": FAST, "output_dir": str(tmp_path / "out")}
    d.update(kw)
    p = tmp_path / "plan.json"
    p.write_text(json.dumps(d))
    return p


def test_default_plan_round_trip():
    p = h.ExperimentPlan.default()
    q = h.ExperimentPlan.from_dict(p.to_dict())
    assert q == p and q.config_hash == p.config_hash
    assert h.ExperimentPlan.default(output_dir="elsewhere").config_hash == p.config_hash
    assert h.ExperimentPlan.default(seed=1).config_hash != p.config_hash


@pytest.mark.parametrize("patch,msg", [
    ({"bogus": 1}, "unknown key"),
    ({"grids": {"ns": 512, "wat": 1}}, "unknown key"),
    ({"studies": ["nope"]}, "unknown studies"),
    ({"studies": ["hk", "hk"]}, "duplicate"),
    ({"beta": 0.5}, "outside"),
    ({"p": 4.0}, "must exceed 4"),
    ({"kappa_list": {"ns-l1": []}}, "nonempty"),
    ({"seed": -1}, "seed"),
    ({"tolerances": {"oseen_exact": 0.0}}, "positive"),
])
def test_invalid_plans_rejected(patch, msg):
    with pytest.raises(h.PlanError, match=msg):
        h.ExperimentPlan.from_dict(patch, fill_defaults=True)


def test_strict_parse_needs_every_key():
    with pytest.raises(h.PlanError, match="missing"):
        h.ExperimentPlan.from_dict({"studies": []})


def test_empty_plan_gives_no_entries(tmp_path):
    rep = h.run_plan(h.ExperimentPlan.default(studies=[]), tmp_path, write=True)
    assert rep.entries == [] and rep.exit_code() == 0
    assert rep.out_of_scope["criterion"] == 10
    assert (tmp_path / "report.json").exists()


def test_three_kappas_flag_insufficient_points():
    plan = h.ExperimentPlan.default(studies=["viscous-drift"])
    plan.kappa_list["viscous-drift"] = [1 / 20, 1 / 40, 1 / 80]
    rep = h.run_plan(plan, write=False)
    slope = [e for e in rep.entries if "slope" in e.name][0]
    assert slope.status == "insufficient points" and slope.value is None
    assert rep.exit_code() == 2


def test_study_error_gives_partial_exit(monkeypatch):
    def boom(plan, res):
        raise ValueError("broken")
    monkeypatch.setitem(h.STUDY_FUNCS, "selfsim", boom)
    rep = h.run_plan(h.ExperimentPlan.default(studies=["hk", "selfsim"]), write=False)
    assert rep.failed_studies == ["selfsim"] and rep.studies["selfsim"]["error_kind"] == "other"
    assert rep.exit_code() == 3
    rep = h.run_plan(h.ExperimentPlan.default(studies=["selfsim"]), write=False)
    assert rep.exit_code() == 2


def test_expected_deviation_status():
    res = h.StudyResult("burnett", 0)
    e = res.check(h.EXPECTED_DEVIATIONS[0], 8, 10.0, "<=", 0.01)
    assert e.status == "expected-deviation" and e.passed
    assert res.check("other", 8, 10.0, "<=", 0.01).status == "fail"


def test_outputs_deterministic(tmp_path):
    plan = h.ExperimentPlan.default(studies=FAST)
    h.run_plan(plan, tmp_path / "a")
    h.run_plan(plan, tmp_path / "b", threads=3)
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "timing.json")
    assert "entries.csv" in files and "hk_trajectories.csv" in files and "drift.svg" in files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_cli_exit_codes_and_report(tmp_path, capsys):
    plan = _plan(tmp_path)
    assert cli.main(["validate", "--plan", str(plan), "--fill-defaults"]) == cli.EXIT_OK
    assert cli.main(["validate", "--plan", str(plan)]) == cli.EXIT_INVALID
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["run", "--plan", str(bad)]) == cli.EXIT_INVALID
    assert cli.main(["run", "--plan", str(plan), "--fill-defaults", "--threads", "0"]) == cli.EXIT_INVALID
    assert cli.main(["run", "--plan", str(plan), "--fill-defaults"]) == cli.EXIT_OK
    out = tmp_path / "out"
    (out / "drift.svg").unlink()
    assert cli.main(["report", "--out", str(out)]) == cli.EXIT_OK
    assert (out / "drift.svg").exists()
    assert "[OUT-OF-SCOPE]" in capsys.readouterr().out
    assert cli.main(["report", "--out", str(tmp_path / "missing")]) == cli.EXIT_INVALID


def test_cli_default_plan_parses(capsys):
    assert cli.main(["default-plan"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert h.ExperimentPlan.from_dict(d) == h.ExperimentPlan.default()
