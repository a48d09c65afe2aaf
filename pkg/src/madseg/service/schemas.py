"""Pydantic request/response models of the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class ErrorResponse(BaseModel):
    """Uniform error body; ``category`` drives the client's exit code."""

    category: str  # config | data | numeric | internal
    message: str


class SimulateRequest(BaseModel):
    config: str = Field(description="path to the run config file")
    out_dir: str = Field(description="directory receiving images, masks, manifest")
    count: int = Field(default=8, ge=0, description="number of pairs to generate")
    seed: int | None = Field(default=None, description="override train.seed")


class SimulateResponse(BaseModel):
    out_dir: str
    manifest: str
    pairs: int


class TrainRequest(BaseModel):
    config: str
    out: str = Field(description="checkpoint file to write")
    log: str | None = Field(default=None, description="training-log CSV (default: <out>.log.csv)")
    labeler_csv: str | None = Field(default=None, description="optional committee audit CSV")
    seed: int | None = None
    refresh_every: int | None = Field(default=None, description="override train.labeler_refresh_every")
    ablate: str | None = Field(default=None, description="baseline|no_msff|no_attention|with_ca")
    quiet: bool = Field(default=False, description="suppress per-step progress lines")


class FinalLosses(BaseModel):
    l1: float
    focal: float
    seg: float
    bce_labeled: float
    bce_pseudo: float
    total: float
    n_pseudo_used: int
    n_pseudo_unknown: int


class TrainResponse(BaseModel):
    checkpoint: str
    log: str
    steps_run: int
    stopped_early: bool
    final: FinalLosses


class EvalRequest(BaseModel):
    checkpoint: str
    config: str | None = Field(default=None, description="config for dataset paths (default: the checkpoint's snapshot)")
    out_dir: str = Field(description="directory receiving scores CSV (and heatmaps)")
    heatmaps: bool | None = Field(default=None, description="override eval.heatmaps")
    pixel_metrics: bool | None = None


class EvalResponse(BaseModel):
    category: str
    auroc: float
    pixel_auroc: float | None
    n_normal: int
    n_anomalous: int
    scores_csv: str
    heatmap_dir: str | None
    n_heatmaps: int


class AblateRequest(BaseModel):
    config: str
    which: str = Field(description="baseline|no_msff|no_attention|with_ca, or 'all'")
    out_dir: str
    seed: int | None = None
    quiet: bool = True


class AblateRow(BaseModel):
    variant: str
    auroc: float
    steps_run: int


class AblateResponse(BaseModel):
    rows: list[AblateRow]
    table: str
    csv: str


class ScoreRequest(BaseModel):
    checkpoint: str
    image_path: str | None = None
    image_b64: str | None = Field(
        default=None, description="base64 PNG/JPEG bytes (alternative to image_path)"
    )
    heatmap_out: str | None = Field(
        default=None, description="optional path for the 16-bit heatmap PNG"
    )


class ScoreResponse(BaseModel):
    image_score: float
    latent_score: float
    heatmap_out: str | None


class SynthRequest(BaseModel):
    out_dir: str
    category: str = "stripes"
    size: int = 64
    n_train: int = 200
    n_test_normal: int = 50
    n_test_anomalous: int = 50
    seed: int = 0


class SynthResponse(BaseModel):
    category_dir: str
    texture_dir: str
