"""FastAPI wiring. Handlers run synchronously: a desk-scale training job
holds the worker for minutes by design, and the CLI waits on it anyway."""
from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from . import handlers
from . import schemas as S


def _run(fn, req):
    try:
        return fn(req)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc)) from exc
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc


def create_app() -> FastAPI:
    app = FastAPI(title="restolab", version=__version__,
                  description="Degradation synthesis, restoration training, "
                              "attribution, and adapter planning on one box.")

    @app.get("/health", response_model=S.HealthResponse)
    def health() -> S.HealthResponse:
        return S.HealthResponse(status="ok", version=__version__)

    @app.post("/make-data", response_model=S.MakeDataResponse)
    def make_data(req: S.MakeDataRequest) -> S.MakeDataResponse:
        return _run(handlers.make_data, req)

    @app.post("/degrade", response_model=S.DegradeResponse)
    def degrade(req: S.DegradeRequest) -> S.DegradeResponse:
        return _run(handlers.degrade, req)

    @app.post("/pretrain", response_model=S.PretrainResponse)
    def pretrain(req: S.PretrainRequest) -> S.PretrainResponse:
        return _run(handlers.pretrain, req)

    @app.post("/finetune", response_model=S.FinetuneResponse)
    def finetune(req: S.FinetuneRequest) -> S.FinetuneResponse:
        return _run(handlers.finetune, req)

    @app.post("/faig", response_model=S.FaigResponse)
    def faig_scores(req: S.FaigRequest) -> S.FaigResponse:
        return _run(handlers.faig_scores, req)

    @app.post("/plan-ranks", response_model=S.PlanRanksResponse)
    def plan_ranks(req: S.PlanRanksRequest) -> S.PlanRanksResponse:
        return _run(handlers.plan_ranks, req)

    @app.post("/merge", response_model=S.MergeResponse)
    def merge(req: S.MergeRequest) -> S.MergeResponse:
        return _run(handlers.merge, req)

    @app.post("/eval", response_model=S.EvalResponse)
    def evaluate(req: S.EvalRequest) -> S.EvalResponse:
        return _run(handlers.evaluate, req)

    return app
