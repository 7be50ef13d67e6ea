"""Request/response models for the prediction gateway."""

from __future__ import annotations

from pydantic import BaseModel, Field


class PredictRequest(BaseModel):
    inputs: list[list[float]] = Field(min_length=1)


class PredictResponse(BaseModel):
    """Hard mode returns labels only; soft mode returns probability rows."""

    labels: list[int] | None = None
    probs: list[list[float]] | None = None


class SwapResponse(BaseModel):
    status: str
    triggers: int
    target: int


class StatusResponse(BaseModel):
    status: str
    mode: str
    input_dim: int
    num_classes: int
    protection: bool
    model_digest: str


class AuditEntry(BaseModel):
    timestamp: float
    query_digest: str
    label: int
    flipped: bool
    similarity_bucket: float
