"""HTTP service wrapping the simulator, suites, and regression runner.

The CLI is a thin client of these endpoints; by default it mounts the app
in-process, and with --server it talks to a remote instance.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import harness
from .authn import StapleInvalidAtTransmit
from .checks import check_run
from .simnet import HorizonTooSmall, ScenarioConfig, run_scenario


class DropRuleModel(BaseModel):
    mkind: int | None = None
    view: int | None = None
    src: int | None = None
    dst: int | None = None
    from_ms: int = 0
    until_ms: int | None = None


class ScenarioModel(BaseModel):
    f: int = Field(ge=1)
    seed: int = 0
    name: str = ""
    delta_ms: int = 50
    tick_ms: int = 250
    view_timeout_base_ms: int = 1000
    stabilize_at_ms: int | None = None
    corrupt: list[int] = []
    corrupt_style: str = "silent"
    attacker_value: str = "baad"  # hex
    drops: list[DropRuleModel] = []
    drop_policy: str = "lost"
    inject: list[dict] = []
    request: str = "01020304"  # hex
    request_at_ms: int = 0
    horizon_ms: int = 4000

    def to_scenario(self) -> ScenarioConfig:
        return ScenarioConfig.from_json(self.model_dump())


class RunRequest(BaseModel):
    scenario: ScenarioModel
    include_trace: bool = True


class TrialModel(BaseModel):
    scenario: str
    f: int
    seed: int
    terminate_view: int | None
    client_latency_ms: int | None
    message_count_critical_path: int | None
    value: str | None
    checks_ok: bool


class RunResponse(BaseModel):
    ok: bool
    trial: TrialModel
    checks: dict
    trace_ndjson: str | None = None


class CommonSuiteRequest(BaseModel):
    f: int = Field(default=1, ge=1)
    trials: int = Field(default=10, ge=1)
    seed: int = 0


class FailureSuiteRequest(BaseModel):
    f: int = Field(default=2, ge=1)
    seed: int = 0


class SuiteResponse(BaseModel):
    ok: bool
    trials: list[TrialModel]
    aggregates: dict
    csv: str


class RegressionsRequest(BaseModel):
    seed: int = 0


class RegressionsResponse(BaseModel):
    ok: bool
    clean_ok: bool
    bugs: dict


def _suite_response(report: harness.LatencyReport) -> SuiteResponse:
    data = report.to_json()
    return SuiteResponse(
        ok=data["ok"],
        trials=[TrialModel(**t) for t in data["trials"]],
        aggregates=data["aggregates"],
        csv=report.to_csv(),
    )


def create_app() -> FastAPI:
    app = FastAPI(title="bftkit", description="PBFT simulation and checking service")

    @app.get("/health")
    def health() -> dict:
        return {"ok": True}

    @app.post("/run", response_model=RunResponse)
    def run(req: RunRequest) -> RunResponse:
        try:
            sc = req.scenario.to_scenario()
            result = run_scenario(sc)
        except HorizonTooSmall as e:
            raise HTTPException(status_code=422, detail=str(e))
        except StapleInvalidAtTransmit as e:
            raise HTTPException(status_code=500, detail=f"transmit validation failed: {e}")
        report = check_run(result)
        trial = harness._trial(sc, result, report)
        return RunResponse(
            ok=report.ok,
            trial=TrialModel(**trial.to_json()),
            checks=report.checks,
            trace_ndjson=result.prefix.to_ndjson() if req.include_trace else None,
        )

    @app.post("/suite/common", response_model=SuiteResponse)
    def suite_common(req: CommonSuiteRequest) -> SuiteResponse:
        try:
            report = harness.run_common_case(req.f, trials=req.trials, seed=req.seed)
        except harness.CheckFailure as e:
            raise HTTPException(status_code=500, detail=str(e))
        return _suite_response(report)

    @app.post("/suite/failure", response_model=SuiteResponse)
    def suite_failure(req: FailureSuiteRequest) -> SuiteResponse:
        try:
            report = harness.run_failure_suite(f=req.f, seed=req.seed)
        except harness.CheckFailure as e:
            raise HTTPException(status_code=500, detail=str(e))
        return _suite_response(report)

    @app.post("/regressions", response_model=RegressionsResponse)
    def regressions(req: RegressionsRequest) -> RegressionsResponse:
        out = harness.run_regressions(seed=req.seed)
        return RegressionsResponse(ok=out["ok"], clean_ok=out["clean_ok"], bugs=out["bugs"])

    return app


app = create_app()
