"""HTTP gateway around a protected model.

The service demonstrates the plug-and-play contract on a live endpoint:
predictions are served through the watermark pipeline, the watermark set
can be hot-swapped or disabled through admin routes with zero model
retraining, and an append-only audit log records every served query for
later ownership claims.

Admin routes require `Authorization: Bearer <token>` where the token comes
from the NHT_ADMIN_TOKEN environment variable (or the create_app
argument). Without a configured token the admin surface stays locked.
"""

from __future__ import annotations

import hashlib
import hmac as hmac_mod
import io
import json
import os
import threading
import time
from dataclasses import dataclass, asdict

import numpy as np
from fastapi import Depends, FastAPI, HTTPException, Request, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, StreamingResponse

from ..datagen import read_watermarks
from ..honeytrace import ProtectedModel
from ..numerics import softmax
from .schemas import PredictRequest, PredictResponse, StatusResponse, SwapResponse


@dataclass
class AuditRecord:
    timestamp: float
    query_digest: str
    label: int
    flipped: bool
    similarity_bucket: float


class GatewayState:
    def __init__(self, protected: ProtectedModel, admin_token: str | None):
        self.protected = protected
        self.admin_token = admin_token
        self.protection_enabled = True
        self.audit: list[AuditRecord] = []
        self.audit_lock = threading.Lock()


def create_app(protected: ProtectedModel, admin_token: str | None = None) -> FastAPI:
    if admin_token is None:
        admin_token = os.environ.get("NHT_ADMIN_TOKEN")
    state = GatewayState(protected, admin_token)
    app = FastAPI(title="neurht gateway", version="0.1.0")
    app.state.gateway = state

    @app.exception_handler(RequestValidationError)
    async def malformed_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": "malformed request body"})

    def require_admin(request: Request) -> None:
        header = request.headers.get("authorization", "")
        if state.admin_token is None:
            raise HTTPException(status_code=401, detail="admin token not configured")
        expected = f"Bearer {state.admin_token}"
        if not hmac_mod.compare_digest(header, expected):
            raise HTTPException(status_code=401, detail="bad admin token")

    @app.get("/v1/status", response_model=StatusResponse)
    def status() -> StatusResponse:
        pm = state.protected
        return StatusResponse(
            status="ok",
            mode=pm.params.mode,
            input_dim=pm.model.input_dim,
            num_classes=pm.model.num_classes,
            protection=state.protection_enabled,
            model_digest=pm.model.parameter_digest(),
        )

    @app.post("/v1/predict", response_model=PredictResponse, response_model_exclude_none=True)
    def predict(body: PredictRequest) -> PredictResponse:
        pm = state.protected
        dim = pm.model.input_dim
        rows = body.inputs
        if any(len(row) != dim for row in rows):
            raise HTTPException(status_code=400, detail=f"inputs must have dimension {dim}")
        try:
            batch = np.asarray(rows, dtype=np.float64)
        except (TypeError, ValueError):
            raise HTTPException(status_code=400, detail="inputs must be numeric")
        if not np.all(np.isfinite(batch)):
            raise HTTPException(status_code=400, detail="inputs must be finite")
        labels: list[int] = []
        probs: list[list[float]] = []
        entries: list[AuditRecord] = []
        for row in batch:
            digest = hashlib.sha256(row.astype("<f8").tobytes()).hexdigest()
            if state.protection_enabled:
                out = pm.protect(row)
                label, flipped, bucket = out.label, out.flipped, round(out.similarity, 1)
                row_probs = out.probs
            else:
                _, logits = pm.model.forward(row[None, :])
                label = int(np.argmax(logits[0]))
                flipped, bucket = False, 0.0
                row_probs = softmax(logits[0])
            labels.append(label)
            if pm.params.mode == "soft":
                probs.append([float(p) for p in row_probs])
            entries.append(AuditRecord(time.time(), digest, label, flipped, bucket))
        with state.audit_lock:
            state.audit.extend(entries)
        if pm.params.mode == "hard":
            return PredictResponse(labels=labels)
        return PredictResponse(probs=probs)

    @app.post(
        "/v1/admin/watermark",
        response_model=SwapResponse,
        dependencies=[Depends(require_admin)],
    )
    async def swap_watermark(file: UploadFile) -> SwapResponse:
        payload = await file.read()
        try:
            wm = read_watermarks(io.BytesIO(payload))
        except (ValueError, EOFError) as exc:
            raise HTTPException(status_code=400, detail=f"bad watermark file: {exc}")
        try:
            state.protected.swap_watermarks(wm)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        state.protection_enabled = True
        return SwapResponse(status="swapped", triggers=wm.trigger_count, target=wm.target)

    @app.delete("/v1/admin/watermark", dependencies=[Depends(require_admin)])
    def disable_watermark() -> dict:
        state.protection_enabled = False
        return {"status": "disabled"}

    @app.get("/v1/admin/audit", dependencies=[Depends(require_admin)])
    def audit_log() -> StreamingResponse:
        with state.audit_lock:
            snapshot = list(state.audit)

        def stream():
            for rec in snapshot:
                yield json.dumps(asdict(rec), sort_keys=True) + "\n"

        return StreamingResponse(stream(), media_type="application/x-ndjson")

    return app


def serve(
    protected: ProtectedModel,
    host: str = "127.0.0.1",
    port: int = 8787,
    admin_token: str | None = None,
) -> None:
    """Run the gateway under uvicorn (blocking)."""
    import uvicorn

    app = create_app(protected, admin_token=admin_token)
    uvicorn.run(app, host=host, port=port, log_level="info")
