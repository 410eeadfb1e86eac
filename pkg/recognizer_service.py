# 📄 recognizer_service.py
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
import uvicorn
from fastapi import Depends, FastAPI, HTTPException
from pydantic import BaseModel, Field

from config import DecodeConfig
from errors import DataError, PmsError, VALIDATION_ERRORS
from events import log_event, recent_events
from features import Waveform, normalize_waveform
from finetune import transcribe
from lm import read_arpa
from model import load_checkpoint, num_frames
from pipeline import RunManifest
from security import API_KEY_ENV, get_api_key, using_default_key

app = FastAPI(
    title="PMS Recognizer Service",
    description="Transcription with a fine-tuned checkpoint, run status and event log."
)

SERVICE_NAME = "recognizer-service"
SERVICE_PORT = 8010

# Loaded state (set by configure()).
state = {"model": None, "lm": None, "manifest_path": None, "normalize_audio": True}


class TranscribeRequest(BaseModel):
    samples: List[float] = Field(min_length=1)
    sample_rate: int = 16000
    decoder: Literal["greedy", "beam"] = "greedy"
    beam: Optional[DecodeConfig] = None


class TranscribeResponse(BaseModel):
    text: str
    score: Optional[float] = None
    decoder: str
    frames: int


def configure(checkpoint: Path, manifest: Optional[Path] = None, lm: Optional[Path] = None,
              normalize_audio: bool = True) -> None:
    model, _ = load_checkpoint(checkpoint)
    if model.heads != "ctc":
        raise DataError(f"{checkpoint} has no CTC head; serve a fine-tuned checkpoint")
    state["model"] = model
    state["lm"] = read_arpa(lm) if lm is not None else None
    state["manifest_path"] = manifest
    state["normalize_audio"] = normalize_audio
    log_event(SERVICE_NAME, "INFO", f"Loaded {checkpoint} ({len(model.vocab)} symbols).")
    if using_default_key():
        log_event(SERVICE_NAME, "WARNING", f"{API_KEY_ENV} is not set; /transcribe stays closed until it is.")


# --- Endpoints (no auth) ---
@app.get("/health", status_code=200)
def health():
    return {"status": "ok", "model_loaded": state["model"] is not None}


# --- Secure endpoints (need auth) ---
@app.post("/transcribe", status_code=200, response_model=TranscribeResponse)
def transcribe_samples(request: TranscribeRequest, api_key: str = Depends(get_api_key)):
    model = state["model"]
    if model is None:
        raise HTTPException(503, detail="No model loaded")
    if using_default_key():
        raise HTTPException(503, detail=f"Service API key is the placeholder; set {API_KEY_ENV}")
    try:
        w = Waveform(samples=np.asarray(request.samples), sample_rate=request.sample_rate)
        if w.sample_rate != model.config.sample_rate:
            raise HTTPException(400, detail=f"sample_rate must be {model.config.sample_rate}")
        if state["normalize_audio"]:
            w = normalize_waveform(w)
        decode = None
        if request.decoder == "beam":
            decode = request.beam or DecodeConfig()
        text, score = transcribe(model, w, decode, state["lm"] if decode is not None else None)
    except VALIDATION_ERRORS as e:
        raise HTTPException(400, detail=e.detail)
    except PmsError as e:
        raise HTTPException(500, detail=e.detail)
    log_event(SERVICE_NAME, "INFO", f"Transcribed {w.duration:.2f}s with {request.decoder}: '{text}'")
    return TranscribeResponse(text=text, score=None if decode is None else score, decoder=request.decoder,
                              frames=num_frames(model.config, w.samples.size))


@app.get("/run/status", status_code=200, response_model=RunManifest)
def run_status(api_key: str = Depends(get_api_key)):
    path = state["manifest_path"]
    if path is None or not Path(path).exists():
        raise HTTPException(404, detail="No run manifest configured")
    return RunManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))


@app.get("/log/view", status_code=200)
def view_logs(limit: int = 50, api_key: str = Depends(get_api_key)):
    return recent_events(limit)


if __name__ == "__main__":
    print(f"Starting Recognizer Service on port {SERVICE_PORT}...")
    uvicorn.run(app, host="0.0.0.0", port=SERVICE_PORT)
