"""Scenario runner: common-case latency trials, the three failure scenarios,
the four-bug regression suite, and the TCP smoke mode.

Every simulated run is gated by the embedded checkers (network conformance,
trace refinement, completion measures, fairness audit, certificate and
view-change scans); the harness fails the whole run if any checker fails.
Reports are reproducible: the same seed yields an identical JSON report.
"""

from __future__ import annotations

import io
import csv
import statistics
from dataclasses import dataclass, field

from . import pbft
from .authn import StapleInvalidAtTransmit
from .checks import RunReport, check_run, critical_path_count
from .pbft import Mutants
from .simnet import DropRule, ScenarioConfig, SimResult, run_scenario


class CheckFailure(Exception):
    """An embedded checker rejected a run that was expected to pass."""

    def __init__(self, scenario: str, report: RunReport):
        self.scenario = scenario
        self.report = report
        bad = {k: v for k, v in report.checks.items() if not v.get("ok")}
        super().__init__(f"checkers failed for {scenario}: {sorted(bad)}")


@dataclass(frozen=True)
class ClusterConfig:
    """Cluster shape shared by sim and TCP modes."""

    f: int
    mode: str = "sim"  # or "tcp"
    tick_ms: int = 250
    view_timeout_base_ms: int = 1000
    delta_ms: int = 50
    # tcp mode: node id -> (host, port); keys are generated at startup
    addresses: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return 3 * self.f + 1


@dataclass(frozen=True)
class Trial:
    scenario: str
    f: int
    seed: int
    terminate_view: int | None
    client_latency_ms: int | None
    message_count_critical_path: int | None
    value: str | None
    checks_ok: bool

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "f": self.f,
            "seed": self.seed,
            "terminate_view": self.terminate_view,
            "client_latency_ms": self.client_latency_ms,
            "message_count_critical_path": self.message_count_critical_path,
            "value": self.value,
            "checks_ok": self.checks_ok,
        }


@dataclass(frozen=True)
class LatencyReport:
    trials: tuple[Trial, ...]
    ok: bool

    def aggregates(self) -> dict:
        lats = [t.client_latency_ms for t in self.trials if t.client_latency_ms is not None]
        out = {}
        if lats:
            out["client_latency_ms"] = {
                "mean": round(statistics.fmean(lats), 3),
                "min": min(lats),
                "max": max(lats),
            }
        return out

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "trials": [t.to_json() for t in self.trials],
            "aggregates": self.aggregates(),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["scenario", "f", "seed", "terminate_view", "client_latency_ms",
                    "message_count_critical_path", "value", "checks_ok"])
        for t in self.trials:
            w.writerow([t.scenario, t.f, t.seed, t.terminate_view, t.client_latency_ms,
                        t.message_count_critical_path, t.value, t.checks_ok])
        return buf.getvalue()


# --- scenario library --------------------------------------------------------


def common_scenario(f: int, seed: int) -> ScenarioConfig:
    """All honest, stable network, client request at t=0."""
    return ScenarioConfig(f=f, seed=seed, name=f"common-f{f}", horizon_ms=4000)


def scenario_drop_commits(f: int, seed: int) -> ScenarioConfig:
    """Scenario 1: all view-0 commit messages dropped before stabilization;
    recovery through the first view change."""
    return ScenarioConfig(
        f=f, seed=seed, name="drop-view0-commits", stabilize_at_ms=1600,
        drops=(DropRule(mkind=pbft.KIND_COMMIT, view=0),), horizon_ms=6000,
    )


def scenario_wrong_value(f: int, seed: int) -> ScenarioConfig:
    """Scenario 2: f corrupted non-leader replicas vote for a wrong value."""
    n = 3 * f + 1
    return ScenarioConfig(
        f=f, seed=seed, name="wrong-value-voters",
        corrupt=tuple(range(n - f, n)), corrupt_style="wrong_value", horizon_ms=4000,
    )


def scenario_silent_leaders(f: int, bad_leaders: int, seed: int) -> ScenarioConfig:
    """Scenario 3: the view-0 commits are dropped and the next `bad_leaders`
    leaders are silent, pushing termination to view bad_leaders + 1."""
    return ScenarioConfig(
        f=f, seed=seed, name=f"silent-leaders-{bad_leaders}", stabilize_at_ms=1600,
        drops=(DropRule(mkind=pbft.KIND_COMMIT, view=0),),
        corrupt=tuple(range(1, 1 + bad_leaders)), corrupt_style="silent",
        horizon_ms=4000 * (2 ** bad_leaders) + 4000,
    )


def scenario_split_prepares(seed: int) -> ScenarioConfig:
    """Regression scenario for the duplicate-view-change bug: half the
    replicas prepare a value, the other half see no prepares, so the
    view-change votes split between the value and NULL and the weak
    certificate amplification path is exercised."""
    return ScenarioConfig(
        f=1, seed=seed, name="split-prepares", stabilize_at_ms=1600,
        drops=(DropRule(mkind=pbft.KIND_PREPARE, view=0, dst=2),
               DropRule(mkind=pbft.KIND_PREPARE, view=0, dst=3)),
        horizon_ms=6000,
    )


def latency_band(target_ms: int, sc: ScenarioConfig) -> tuple[int, int]:
    """Tolerance band around a view-deadline target: the view change fires at
    the deadline and completion takes at most four message delays plus
    scheduling slack of two ticks."""
    return target_ms, target_ms + 4 * sc.delta_ms + 2 * sc.tick_ms


# --- runners -----------------------------------------------------------------


def _checked_run(sc: ScenarioConfig, mutants: Mutants | None = None) -> tuple[SimResult, RunReport]:
    result = run_scenario(sc, mutants)
    report = check_run(result)
    return result, report


def _trial(sc: ScenarioConfig, result: SimResult, report: RunReport) -> Trial:
    return Trial(
        scenario=sc.name,
        f=sc.f,
        seed=sc.seed,
        terminate_view=result.terminate_view,
        client_latency_ms=result.client["latency_ms"],
        message_count_critical_path=critical_path_count(result),
        value=result.client["value"],
        checks_ok=report.ok,
    )


def run_common_case(f: int, trials: int = 10, seed: int = 0) -> LatencyReport:
    """All-honest trials; every trial must terminate in view 0 with the
    client value, pass all checkers, and show the expected critical-path
    message count."""
    q = 2 * f + 1
    expected_count = 1 + 2 * q + 2 * q * q
    rows = []
    ok = True
    for k in range(trials):
        sc = common_scenario(f, seed + k)
        result, report = _checked_run(sc)
        if not report.ok:
            raise CheckFailure(sc.name, report)
        t = _trial(sc, result, report)
        rows.append(t)
        ok = ok and (
            t.terminate_view == 0
            and t.value == pbft.vkey(sc.request)
            and t.client_latency_ms is not None
            and t.client_latency_ms < sc.view_timeout_base_ms
            and t.message_count_critical_path == expected_count
        )
    return LatencyReport(trials=tuple(rows), ok=ok)


def run_failure_suite(f: int = 2, seed: int = 0) -> LatencyReport:
    """The three failure scenarios (the third in both one- and two-bad-leader
    variants), each gated by the checkers and its view/latency target."""
    rows = []
    ok = True

    sc = scenario_drop_commits(f, seed)
    result, report = _checked_run(sc)
    if not report.ok:
        raise CheckFailure(sc.name, report)
    t = _trial(sc, result, report)
    lo, hi = latency_band(2 * sc.view_timeout_base_ms, sc)
    ok = ok and t.terminate_view == 1 and lo <= t.client_latency_ms <= hi
    rows.append(t)

    sc = scenario_wrong_value(f, seed + 1)
    result, report = _checked_run(sc)
    if not report.ok:
        raise CheckFailure(sc.name, report)
    t = _trial(sc, result, report)
    ok = ok and t.terminate_view == 0 and t.value == pbft.vkey(sc.request)
    rows.append(t)

    for bad, view, target in ((1, 2, 4000), (2, 3, 8000)):
        sc = scenario_silent_leaders(f, bad, seed + 1 + bad)
        result, report = _checked_run(sc)
        if not report.ok:
            raise CheckFailure(sc.name, report)
        t = _trial(sc, result, report)
        lo, hi = latency_band(target, sc)
        ok = ok and t.terminate_view == view and lo <= t.client_latency_ms <= hi
        rows.append(t)

    return LatencyReport(trials=tuple(rows), ok=ok)


def run_regressions(seed: int = 0) -> dict:
    """Re-introduce each of the four historical bugs behind a switch and
    confirm its designated checker catches it; then confirm the unmutated
    build raises no flags on the same scenarios."""
    s1 = scenario_drop_commits(2, seed)
    split = scenario_split_prepares(seed + 7)
    out: dict = {"bugs": {}, "ok": True}

    # wrong-view staple re-encoding: hard failure at transmit validation
    try:
        run_scenario(s1, Mutants(wrong_view_staples=True))
        detected, details = False, "run completed without transmit failure"
    except StapleInvalidAtTransmit as e:
        detected, details = True, str(e)
    out["bugs"]["wrong_view_staples"] = {
        "detected": detected, "checker": "validate_transmit", "details": details,
    }

    # under-counted certificates: certificate-threshold scan
    result, report = _checked_run(s1, Mutants(under_quorum=True))
    flagged = not report.checks["cert_threshold"]["ok"]
    out["bugs"]["under_quorum"] = {
        "detected": flagged,
        "checker": "cert_threshold_scan",
        "details": report.checks["cert_threshold"]["problems"][:3],
    }

    # premature view timer: TerminateF refinement measure failure
    result, report = _checked_run(s1, Mutants(early_timer=True))
    flagged = not report.checks["refinement_measure"]["ok"]
    out["bugs"]["early_timer"] = {
        "detected": flagged,
        "checker": "refinement_measure_check",
        "details": report.checks["refinement_measure"].get("failures", [])[:3],
    }

    # duplicate view-change votes: single-view-change trace scan
    result, report = _checked_run(split, Mutants(dual_view_change=True))
    flagged = not report.checks["single_view_change"]["ok"]
    out["bugs"]["dual_view_change"] = {
        "detected": flagged,
        "checker": "single_view_change_scan",
        "details": report.checks["single_view_change"]["problems"][:3],
    }

    # no false positives on the clean build
    clean_ok = True
    for sc in (s1, split):
        _, report = _checked_run(sc)
        clean_ok = clean_ok and report.ok
    out["clean_ok"] = clean_ok
    out["ok"] = clean_ok and all(b["detected"] for b in out["bugs"].values())
    return out


def run_single(sc: ScenarioConfig) -> dict:
    """One scenario with full checker output and the trace available;
    used by the service and CLI `sim run`."""
    result, report = _checked_run(sc)
    trial = _trial(sc, result, report)
    return {
        "trial": trial.to_json(),
        "checks": report.checks,
        "ok": report.ok,
        "trace_ndjson": result.prefix.to_ndjson(),
    }


def run_tcp(cluster: ClusterConfig, value: bytes = b"\x01\x02\x03\x04",
            seed: int = 0) -> LatencyReport:
    """Common-case run over loopback TCP; wall-clock latency, same checkers
    applied to the recorded trace."""
    from .tcpnet import run_tcp_cluster

    result = run_tcp_cluster(cluster, value, seed)
    return result
