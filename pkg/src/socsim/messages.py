"""JSON payload schema for bus messages between agents, users, and the engine."""

from __future__ import annotations

import json

# kinds: chat (agent small talk), stance (opinion exchange), tagged (tracked
# spread content), notice (user/system broadcast), interview, interview-answer,
# survey, survey-response, proximity (offline encounter).


def encode(kind: str, text: str = "", **meta) -> bytes:
    body = {"kind": kind, "text": text}
    body.update(meta)
    return json.dumps(body, separators=(",", ":"), sort_keys=True).encode("utf-8")


def decode(payload: bytes) -> dict:
    try:
        body = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return {"kind": "raw", "text": ""}
    if not isinstance(body, dict):
        return {"kind": "raw", "text": str(body)}
    body.setdefault("kind", "chat")
    body.setdefault("text", "")
    return body
