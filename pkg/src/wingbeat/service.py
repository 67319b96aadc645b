"""Field-monitor service: live detection sessions over HTTP + WebSocket.

Control plane is plain HTTP (create/close sessions, metadata submission,
recording listing/fetch); per-session audio travels over one persistent
WebSocket that accepts binary PCM16 frames and emits JSON detection/error
frames. Extra subscribers attach to the same socket path in subscribe role
and receive every event from subscription time onward, in order.

Persistence is zero-admin: WAV files on disk (write-then-rename) plus a
single-file SQLite store for sessions, metadata, and events, so a crash never
corrupts finalized recordings.
"""

from __future__ import annotations

import asyncio
import dataclasses
import json
import sqlite3
import threading
import uuid
from datetime import datetime, timezone
from pathlib import Path

from contextlib import asynccontextmanager

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import FileResponse, JSONResponse

from .audio import CANONICAL_RATE_HZ, pcm16_to_float
from .errors import SessionError, StreamOverflowError
from .pipeline import TwoStageModel
from .stream import DetectionEvent, RecordMode, StreamConfig, StreamSession, event_to_dict

DEFAULT_SPECIES_VOCABULARY = (
    "Aedes aegypti",
    "Anopheles quadrimaculatus",
    "Culex tarsalis",
    "Anopheles albimanus",
    "Culex quinquefasciatus",
    "Aedes albopictus",
    "Anopheles gambiae",
    "unknown",
)

_SCHEMA = """
CREATE TABLE IF NOT EXISTS sessions (
    id TEXT PRIMARY KEY,
    mode TEXT NOT NULL,
    created_at TEXT NOT NULL,
    device_metadata TEXT NOT NULL DEFAULT '{}',
    state TEXT NOT NULL DEFAULT 'open'
);
CREATE TABLE IF NOT EXISTS recordings (
    id TEXT PRIMARY KEY,
    session_id TEXT NOT NULL REFERENCES sessions(id),
    path TEXT NOT NULL,
    sample_rate INTEGER NOT NULL,
    duration_s REAL NOT NULL,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS metadata (
    session_id TEXT NOT NULL REFERENCES sessions(id),
    species_category TEXT,
    environment_notes TEXT,
    lat REAL,
    lon REAL,
    submitted_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS events (
    session_id TEXT NOT NULL REFERENCES sessions(id),
    window_start_s REAL NOT NULL,
    stage1_score REAL NOT NULL,
    mosquito_present INTEGER NOT NULL,
    species TEXT,
    votes TEXT
);
"""


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


class Store:
    """Thread-safe wrapper over the single-file SQLite database."""

    def __init__(self, path):
        self._conn = sqlite3.connect(str(path), check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        self._lock = threading.Lock()
        with self._lock, self._conn:
            self._conn.executescript(_SCHEMA)

    def create_session(self, session_id, mode, device_metadata):
        with self._lock, self._conn:
            self._conn.execute(
                "INSERT INTO sessions (id, mode, created_at, device_metadata) VALUES (?,?,?,?)",
                (session_id, mode, _utcnow(), json.dumps(device_metadata or {})),
            )

    def set_session_state(self, session_id, state):
        with self._lock, self._conn:
            self._conn.execute("UPDATE sessions SET state=? WHERE id=?", (state, session_id))

    def set_session_mode(self, session_id, mode):
        with self._lock, self._conn:
            self._conn.execute("UPDATE sessions SET mode=? WHERE id=?", (mode, session_id))

    def get_session(self, session_id):
        with self._lock:
            row = self._conn.execute(
                "SELECT * FROM sessions WHERE id=?", (session_id,)
            ).fetchone()
        return dict(row) if row else None

    def add_recording(self, recording_id, session_id, path, sample_rate, duration_s):
        with self._lock, self._conn:
            self._conn.execute(
                "INSERT INTO recordings (id, session_id, path, sample_rate, duration_s,"
                " created_at) VALUES (?,?,?,?,?,?)",
                (recording_id, session_id, str(path), sample_rate, duration_s, _utcnow()),
            )

    def get_recording(self, recording_id):
        with self._lock:
            row = self._conn.execute(
                "SELECT * FROM recordings WHERE id=?", (recording_id,)
            ).fetchone()
        return dict(row) if row else None

    def add_metadata(self, session_id, species_category, environment_notes, lat, lon):
        with self._lock, self._conn:
            self._conn.execute(
                "INSERT INTO metadata (session_id, species_category, environment_notes,"
                " lat, lon, submitted_at) VALUES (?,?,?,?,?,?)",
                (session_id, species_category, environment_notes, lat, lon, _utcnow()),
            )

    def add_events(self, session_id, events):
        rows = [
            (
                session_id,
                e.window_start_s,
                e.stage1_score,
                int(e.mosquito_present),
                None if e.species is None else str(e.species),
                None if e.species_votes is None else json.dumps(
                    {str(k): v for k, v in e.species_votes.items()}
                ),
            )
            for e in events
        ]
        with self._lock, self._conn:
            self._conn.executemany(
                "INSERT INTO events (session_id, window_start_s, stage1_score,"
                " mosquito_present, species, votes) VALUES (?,?,?,?,?,?)",
                rows,
            )

    def session_events(self, session_id):
        with self._lock:
            rows = self._conn.execute(
                "SELECT * FROM events WHERE session_id=? ORDER BY window_start_s",
                (session_id,),
            ).fetchall()
        return [dict(r) for r in rows]

    def list_recordings(self, since=None, until=None, species_category=None, detected=None):
        query = [
            "SELECT r.*, s.mode,",
            " (SELECT m.species_category FROM metadata m WHERE m.session_id = r.session_id",
            "  ORDER BY m.submitted_at DESC LIMIT 1) AS species_category,",
            " EXISTS(SELECT 1 FROM events e WHERE e.session_id = r.session_id",
            "        AND e.mosquito_present = 1) AS detected",
            " FROM recordings r JOIN sessions s ON s.id = r.session_id WHERE 1=1",
        ]
        params = []
        if since is not None:
            query.append(" AND r.created_at >= ?")
            params.append(since)
        if until is not None:
            query.append(" AND r.created_at <= ?")
            params.append(until)
        sql = "".join(query)
        with self._lock:
            rows = [dict(r) for r in self._conn.execute(sql, params).fetchall()]
        if species_category is not None:
            rows = [r for r in rows if r["species_category"] == species_category]
        if detected is not None:
            rows = [r for r in rows if bool(r["detected"]) == detected]
        for r in rows:
            r["detected"] = bool(r["detected"])
        return rows

    def close(self):
        with self._lock:
            self._conn.close()


class LiveSession:
    """Server-side state of one open session."""

    def __init__(self, session_id: str, stream: StreamSession):
        self.session_id = session_id
        self.stream = stream
        self.subscribers: list[asyncio.Queue] = []
        self.lock = threading.Lock()

    @property
    def mode(self) -> RecordMode:
        return self.stream.config.mode

    def subscribe(self) -> asyncio.Queue:
        queue: asyncio.Queue = asyncio.Queue()
        with self.lock:
            self.subscribers.append(queue)
        return queue

    def unsubscribe(self, queue: asyncio.Queue) -> None:
        with self.lock:
            if queue in self.subscribers:
                self.subscribers.remove(queue)

    def broadcast(self, frames) -> None:
        with self.lock:
            targets = list(self.subscribers)
        for frame in frames:
            for queue in targets:
                queue.put_nowait(frame)


def event_frame(event: DetectionEvent) -> dict:
    return {"type": "detection", **event_to_dict(event)}


def error_frame(code: str, message: str, **extra) -> dict:
    return {"type": "error", "code": code, "message": message, **extra}


_MODES = {m.value: m for m in RecordMode}


def create_app(model: TwoStageModel, data_dir, species_vocabulary=DEFAULT_SPECIES_VOCABULARY,
               stream_config: StreamConfig | None = None,
               sample_rate_hz: int = CANONICAL_RATE_HZ) -> FastAPI:
    data_dir = Path(data_dir)
    recordings_dir = data_dir / "recordings"
    recordings_dir.mkdir(parents=True, exist_ok=True)
    store = Store(data_dir / "wingbeat.sqlite3")
    base_config = stream_config or StreamConfig(emit_bands=True)
    live: dict[str, LiveSession] = {}
    vocabulary = list(species_vocabulary)

    @asynccontextmanager
    async def lifespan(_app):
        yield
        store.close()

    app = FastAPI(title="wingbeat field monitor", lifespan=lifespan)
    app.state.store = store
    app.state.live = live
    app.state.model = model

    def _bad_request(message, **extra):
        return JSONResponse({"error": message, **extra}, status_code=422)

    @app.post("/sessions")
    async def create_session(body: dict):
        mode_name = body.get("mode", RecordMode.RECORD_AND_DETECT.value)
        if mode_name not in _MODES:
            return _bad_request(f"unknown mode {mode_name!r}", valid_modes=sorted(_MODES))
        session_id = uuid.uuid4().hex[:12]
        config = dataclasses.replace(base_config, mode=_MODES[mode_name])
        stream = StreamSession(model, config, sample_rate_hz, session_id=session_id)
        live[session_id] = LiveSession(session_id, stream)
        store.create_session(session_id, mode_name, body.get("device_metadata"))
        return {"session_id": session_id, "mode": mode_name}

    @app.delete("/sessions/{session_id}")
    async def close_session(session_id: str):
        row = store.get_session(session_id)
        if row is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        session = live.pop(session_id, None)
        if session is None:
            return {"session_id": session_id, "state": "closed"}  # idempotent
        paths = session.stream.persist_segments(recordings_dir)
        for path in paths:
            store.add_recording(
                path.stem, session_id, path, session.stream.rate,
                _wav_duration(path),
            )
        session.stream.close()
        store.set_session_state(session_id, "closed")
        session.broadcast([{"type": "closed"}])
        return {
            "session_id": session_id,
            "state": "closed",
            "recordings": [p.stem for p in paths],
        }

    @app.post("/sessions/{session_id}/mode")
    async def change_mode(session_id: str, body: dict):
        session = live.get(session_id)
        if session is None:
            return JSONResponse({"error": "unknown or closed session"}, status_code=404)
        mode_name = body.get("mode")
        if mode_name not in _MODES:
            return _bad_request(f"unknown mode {mode_name!r}", valid_modes=sorted(_MODES))
        session.stream.set_mode(_MODES[mode_name])
        store.set_session_mode(session_id, mode_name)
        return {"session_id": session_id, "mode": mode_name}

    @app.post("/sessions/{session_id}/metadata")
    async def submit_metadata(session_id: str, body: dict):
        if store.get_session(session_id) is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        species = body.get("species_category")
        if species is not None and species not in vocabulary:
            return _bad_request(
                f"unknown species_category {species!r}", vocabulary=vocabulary
            )
        location = body.get("location") or {}
        store.add_metadata(
            session_id, species, body.get("environment_notes"),
            location.get("lat"), location.get("lon"),
        )
        return {"session_id": session_id, "stored": True}

    @app.get("/species")
    async def species_vocabulary_endpoint():
        return {"species": vocabulary}

    @app.get("/recordings")
    async def list_recordings(since: str | None = None, until: str | None = None,
                              species_category: str | None = None,
                              detected: bool | None = None):
        rows = store.list_recordings(since, until, species_category, detected)
        for row in rows:
            row.pop("path", None)
        return {"recordings": rows}

    @app.get("/recordings/{recording_id}")
    async def fetch_recording(recording_id: str):
        row = store.get_recording(recording_id)
        if row is None:
            return JSONResponse({"error": "unknown recording"}, status_code=404)
        return FileResponse(row["path"], media_type="audio/wav",
                            filename=f"{recording_id}.wav")

    @app.get("/sessions/{session_id}/events")
    async def session_events(session_id: str):
        if store.get_session(session_id) is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        return {"events": store.session_events(session_id)}

    @app.websocket("/sessions/{session_id}/stream")
    async def stream_socket(websocket: WebSocket, session_id: str, role: str = "ingest"):
        await websocket.accept()
        session = live.get(session_id)
        if session is None:
            await websocket.send_json(error_frame("unknown_session",
                                                  f"no open session {session_id!r}"))
            await websocket.close()
            return
        if role == "subscribe":
            await _serve_subscriber(websocket, session)
        else:
            await _serve_ingest(websocket, session, store)

    async def _serve_subscriber(websocket: WebSocket, session: LiveSession):
        if session.mode is RecordMode.RECORD_ONLY:
            await websocket.send_json(error_frame(
                "unsupported_mode", "record_only sessions emit no detection events"))
            await websocket.close()
            return
        queue = session.subscribe()
        try:
            while True:
                frame = await queue.get()
                await websocket.send_json(frame)
                if frame.get("type") == "closed":
                    break
        except WebSocketDisconnect:
            pass
        finally:
            session.unsubscribe(queue)

    async def _serve_ingest(websocket: WebSocket, session: LiveSession, store: Store):
        try:
            while True:
                message = await websocket.receive()
                if message["type"] == "websocket.disconnect":
                    break
                if message.get("bytes") is not None:
                    frames = _ingest_chunk(session, store, message["bytes"])
                    for frame in frames:
                        await websocket.send_json(frame)
                elif message.get("text"):
                    await websocket.send_json(error_frame(
                        "unexpected_frame", "audio socket expects binary PCM16 frames"))
        except WebSocketDisconnect:
            pass

    def _ingest_chunk(session: LiveSession, ingest_store: Store, payload: bytes) -> list[dict]:
        try:
            samples = pcm16_to_float(payload)
        except ValueError as exc:
            return [error_frame("bad_pcm", str(exc))]
        try:
            session.stream.push_audio(samples)
        except SessionError as exc:
            return [error_frame("session_closed", str(exc))]
        except StreamOverflowError as exc:
            return [error_frame("overflow", str(exc),
                                dropped_samples=exc.dropped_samples)]
        except ValueError as exc:
            return [error_frame("bad_audio", str(exc))]
        events = session.stream.poll_detections()
        if not events:
            return []
        ingest_store.add_events(session.session_id, events)
        frames = [event_frame(e) for e in events]
        session.broadcast(frames)
        return frames

    return app


def _wav_duration(path) -> float:
    import wave

    with wave.open(str(path), "rb") as wf:
        return wf.getnframes() / wf.getframerate()
