# 📄 events.py
"""Structured event log and metrics stream for pipeline stages."""
import json
import threading
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, Field

# --- In-memory event buffer (read by the recognizer service's /log/view) ---
events: List[dict] = []
_lock = threading.Lock()
_sink: Optional[Path] = None
# ---


class LogEntry(BaseModel):
    component: str
    run_id: str = "N/A"
    level: str
    message: str
    context: dict = Field(default_factory=dict)


def set_event_sink(path: Optional[Path]) -> None:
    """Route subsequent events to a JSON-lines file as well as the console."""
    global _sink
    _sink = Path(path) if path is not None else None
    if _sink is not None:
        _sink.parent.mkdir(parents=True, exist_ok=True)


def log_event(component: str, level: str, message: str, context: Optional[dict] = None, run_id: str = "N/A") -> dict:
    """Record one event: console line, in-memory buffer and optional sink."""
    entry = LogEntry(component=component, run_id=run_id, level=level, message=message, context=context or {})
    data = entry.model_dump()
    tag = component.replace("-", " ").title().replace(" ", "")
    print(f"[{tag}] {level}: {message}")
    with _lock:
        events.append(data)
        if _sink is not None:
            with open(_sink, "a", encoding="utf-8") as f:
                f.write(json.dumps(data, sort_keys=True) + "\n")
    return data


def recent_events(limit: int = 50) -> List[dict]:
    with _lock:
        return list(events[-limit:])


class MetricsWriter:
    """Append-only JSON-lines metrics stream, one record per step or stage."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path is not None else None
        self.records: List[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is None:
            return
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
