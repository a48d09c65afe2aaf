"""FastAPI application exposing the pipeline commands.

Package errors surface as HTTP 400 with a uniform body whose ``category``
field the CLI maps onto exit codes; anything unexpected becomes a 500.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, commands
from ..errors import MadsegError, error_category
from . import schemas


def create_app() -> FastAPI:
    app = FastAPI(
        title="madseg",
        version=__version__,
        description=(
            "Memory-augmented surface-defect segmentation: simulate "
            "anomalies, train, evaluate, ablate, and score images."
        ),
    )

    @app.exception_handler(MadsegError)
    async def _package_error(request: Request, exc: MadsegError) -> JSONResponse:
        return JSONResponse(
            status_code=400,
            content=schemas.ErrorResponse(
                category=error_category(exc), message=str(exc)
            ).model_dump(),
        )

    @app.exception_handler(Exception)
    async def _unexpected_error(request: Request, exc: Exception) -> JSONResponse:
        return JSONResponse(
            status_code=500,
            content=schemas.ErrorResponse(
                category="internal", message=f"{type(exc).__name__}: {exc}"
            ).model_dump(),
        )

    @app.get("/health", response_model=schemas.HealthResponse)
    async def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(version=__version__)

    @app.post("/simulate", response_model=schemas.SimulateResponse)
    def simulate_endpoint(req: schemas.SimulateRequest) -> schemas.SimulateResponse:
        return commands.run_simulate(req)

    @app.post("/train", response_model=schemas.TrainResponse)
    def train_endpoint(req: schemas.TrainRequest) -> schemas.TrainResponse:
        return commands.run_train(req)

    @app.post("/eval", response_model=schemas.EvalResponse)
    def eval_endpoint(req: schemas.EvalRequest) -> schemas.EvalResponse:
        return commands.run_eval(req)

    @app.post("/ablate", response_model=schemas.AblateResponse)
    def ablate_endpoint(req: schemas.AblateRequest) -> schemas.AblateResponse:
        return commands.run_ablate(req)

    @app.post("/score", response_model=schemas.ScoreResponse)
    def score_endpoint(req: schemas.ScoreRequest) -> schemas.ScoreResponse:
        return commands.run_score(req)

    @app.post("/synth", response_model=schemas.SynthResponse)
    def synth_endpoint(req: schemas.SynthRequest) -> schemas.SynthResponse:
        return commands.run_synth(req)

    return app
