"""Pydantic request/response models for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class ToyDataRequest(BaseModel):
    out_dir: str
    categories: int = Field(default=3, ge=1)
    train_per_category: int = Field(default=40, ge=1)
    test_per_category: int = Field(default=10, ge=1)
    seed: int = 0
    image_size: int = Field(default=64, ge=8)


class ToyDataResponse(BaseModel):
    root: str
    categories: list[str]


class MetricRow(BaseModel):
    category: str
    n_images: int
    i_roc: float
    p_roc: float
    p_f1: float
    ap: float
    routing_accuracy: float | None = None


class MemoryReportModel(BaseModel):
    total_bytes: int
    additional_bytes: int
    total_mb: str
    additional_mb: str
    breakdown: dict[str, int]


class ReportModel(BaseModel):
    scenario: str
    records: list[MetricRow]
    aggregate: MetricRow
    memory: MemoryReportModel


class TrainRequest(BaseModel):
    data_root: str
    out_dir: str
    scenario: str = "single"
    seed: int | None = None
    order: list[str] | None = None
    workers: int = Field(default=1, ge=1)
    config: dict | None = None  # TrainConfig JSON overrides


class TrainResponse(BaseModel):
    bundle: str
    report: ReportModel


class EvalRequest(BaseModel):
    bundle: str
    data_root: str


class IdentifyRequest(BaseModel):
    bundle: str
    image_path: str | None = None
    image_b64: str | None = None


class IdentifyResponse(BaseModel):
    task_id: int
    task_name: str
    distances: list[float]


class InferRequest(IdentifyRequest):
    with_heatmap: bool = False


class InferResponse(IdentifyResponse):
    image_score: float
    heatmap_png_b64: str | None = None


class QuantizeRequest(BaseModel):
    bundle: str
    out_dir: str


class QuantizeResponse(BaseModel):
    bundle: str
    before: MemoryReportModel
    after: MemoryReportModel


class MemReportRequest(BaseModel):
    bundle: str | None = None
    arch: str = "wide_resnet50_2"
    kind: str = "linear"
    layers: list[int] = Field(default_factory=lambda: [2, 3])
    precision: str = "f32"
    tasks: int = Field(default=1, ge=1)
