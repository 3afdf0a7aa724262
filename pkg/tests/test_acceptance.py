"""End-to-end acceptance: the full default plan, one printed verdict per criterion.

The plan runs once per module (several minutes on one core). Each test prints
a single line "[PASS] C<n> ..." or "[FAIL] C<n> ..." before asserting.
"""
import json

import pytest

from artifact import harness as h

pytestmark = pytest.mark.slow

# wall-clock budgets per study, in seconds
BUDGET = {"hk": 1.0, "viscous-drift": 10.0, "ns-l1": 600.0, "burnett": 1800.0}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    report = h.run_plan(h.ExperimentPlan.default(), out, threads=1)
    timing = json.loads((out / "timing.json").read_text())
    return report, timing


def _verdict(capsys, crit, ok, text):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] C{crit} {text}")


def _check(run, capsys, crit, text, exclude=()):
    report, timing = run
    entries = [e for e in report.entries if e.criterion == crit and e.name not in exclude]
    bad = [f"{e.study}/{e.name} = {e.value} ({e.status}, tol {e.tolerance})" for e in entries if not e.passed]
    slow = [f"{s} took {timing[s]:.1f}s > {b:g}s" for s, b in BUDGET.items()
            if any(e.study == s for e in entries) and timing[s] > b]
    ok = bool(entries) and not bad and not slow
    summary = "; ".join(f"{e.name}={e.value:.3g}" for e in entries if e.value is not None)
    _verdict(capsys, crit, ok, f"{text}: {summary}" if ok else f"{text}: {bad + slow}")
    assert entries, f"no entries for criterion {crit}"
    assert not bad, bad
    assert not slow, slow


def test_no_study_raised(run):
    report, _ = run
    assert report.failed_studies == []


def test_c1_hk_invariants(run, capsys):
    _check(run, capsys, 1, "point-vortex invariants and pair period")


def test_c2_viscous_drift(run, capsys):
    _check(run, capsys, 2, "viscous drift decays exponentially in 1/kappa")


def test_c3_ns_l1_rate(run, capsys):
    report, _ = run
    e = [e for e in report.entries if e.criterion == 3]
    assert len(e) == 1 and e[0].points == 4
    _check(run, capsys, 3, "L1 Lamb-Oseen error slope")


def test_c4_single_oseen(run, capsys):
    _check(run, capsys, 4, "single Oseen vortex exactness")


def test_c5_pointwise_shape(run, capsys):
    _check(run, capsys, 5, "pointwise velocity error shape and far-field rate")


def test_c6_self_similar(run, capsys):
    _check(run, capsys, 6, "self-similar operator identities and corrector")


def test_c7_collision(run, capsys):
    _check(run, capsys, 7, "collision operator suite")


def test_c8_moment_identities(run, capsys):
    _check(run, capsys, 8, "velocity-moment identities", exclude=h.EXPECTED_DEVIATIONS)


@pytest.mark.xfail(strict=True, reason="bilinear rows 1-2 normalise to 1 and 5/2, not to eta0 and eta_c")
@pytest.mark.parametrize("name", h.EXPECTED_DEVIATIONS)
def test_c8_stated_coefficients(run, capsys, name):
    report, _ = run
    e = next(e for e in report.entries if e.name == name)
    assert e.status == "expected-deviation"
    with capsys.disabled():
        print(f"\n[XFAIL] C8 {name}: {e.value:.3g} (tol {e.tolerance})")
    assert e.value <= 0.01


def test_c9_hilbert_hierarchy(run, capsys):
    _check(run, capsys, 9, "Hilbert hierarchy cancellation and remainder scaling")


def test_c10_out_of_scope(run, capsys):
    report, _ = run
    oos = report.out_of_scope
    ok = oos["criterion"] == 10 and "[OUT-OF-SCOPE]" in "\n".join(report.lines())
    _verdict(capsys, 10, ok, f"reported out of scope: {oos['reason']}")
    assert ok
    assert report.exit_code() == 0
