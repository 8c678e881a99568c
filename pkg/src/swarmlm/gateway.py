"""HTTP/WebSocket service wrapping a swarm client: text generation, token
streaming, and swarm status. Stateless: every request runs its own inference
session; all swarm state lives in the registry and servers.
"""

from __future__ import annotations

import asyncio
import logging
import threading
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field, ValidationError

from .allocation import BlockRange, SwarmView, block_throughputs, swarm_throughput
from .client import SwarmClient
from .errors import NoRouteError, SessionError, SwarmError
from .registry import now_ms

log = logging.getLogger(__name__)

MAX_NEW_TOKENS = 512
PER_IP_SESSION_CAP = 4
WS_SUBPROTOCOL = "petal-stream-v1"


class GenerateRequest(BaseModel):
    prompt: str = Field(min_length=1)
    max_new_tokens: int = Field(default=64, ge=1, le=MAX_NEW_TOKENS)
    strategy: str = Field(default="greedy", pattern="^(greedy|temperature)$")
    temperature: float | None = Field(default=None, gt=0)
    seed: int | None = None


def tokens_from_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def text_from_tokens(tokens: list[int]) -> str:
    # latin-1 keeps the byte<->char mapping 1:1 so streamed chunks concatenate
    return bytes(tokens).decode("latin-1")


class _IpCap:
    def __init__(self, cap: int):
        self.cap = cap
        self._counts: dict[str, int] = {}
        self._lock = threading.Lock()

    def acquire(self, ip: str) -> bool:
        with self._lock:
            if self._counts.get(ip, 0) >= self.cap:
                return False
            self._counts[ip] = self._counts.get(ip, 0) + 1
            return True

    def release(self, ip: str):
        with self._lock:
            n = self._counts.get(ip, 1) - 1
            if n <= 0:
                self._counts.pop(ip, None)
            else:
                self._counts[ip] = n


def swarm_status(client: SwarmClient) -> dict:
    entries = client.lookup()
    L = client.n_blocks
    view = SwarmView(L, [(e.server_id, e.range, e.throughput) for e in entries])
    t = block_throughputs(view)
    coverage = np.zeros(L, int)
    for e in entries:
        coverage[e.range.start : e.range.end] += 1
    now = now_ms()
    return {
        "n_blocks": L,
        "max_seq": client.ckpt.config.max_seq,
        "coverage": coverage.tolist(),
        "bottleneck_throughput": swarm_throughput(t) if L else 0.0,
        "servers": [
            {
                "id": e.server_id,
                "range": [e.range.start, e.range.end],
                "throughput": e.throughput,
                "age_ms": max(0, now - e.announced_at),
            }
            for e in entries
        ],
    }


def _run_generation(client: SwarmClient, req: GenerateRequest, on_token=None) -> dict:
    prompt_tokens = tokens_from_text(req.prompt)
    t0 = time.monotonic()
    tokens = client.generate(
        prompt_tokens,
        req.max_new_tokens,
        strategy=req.strategy,
        temperature=req.temperature or 1.0,
        seed=req.seed or 0,
        on_token=on_token,
    )
    elapsed = max(time.monotonic() - t0, 1e-9)
    return {
        "text": text_from_tokens(tokens),
        "tokens": tokens,
        "steps_per_s": len(tokens) / elapsed,
    }


def build_app(client: SwarmClient, static_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="swarm gateway")
    cap = _IpCap(PER_IP_SESSION_CAP)

    def client_ip(request) -> str:
        return request.client.host if request.client else "unknown"

    @app.post("/api/v1/generate")
    def generate(req: GenerateRequest, request: Request):
        ip = client_ip(request)
        if not cap.acquire(ip):
            return JSONResponse({"error": "too many concurrent sessions"}, status_code=429)
        try:
            return _run_generation(client, req)
        except NoRouteError as e:
            return JSONResponse({"error": "no route", "missing_blocks": e.missing_blocks}, status_code=503)
        except (SessionError, SwarmError) as e:
            return JSONResponse({"error": str(e)}, status_code=504)
        finally:
            cap.release(ip)

    @app.get("/api/v1/swarm")
    def swarm(request: Request):
        try:
            return swarm_status(client)
        except SwarmError:
            # an unreachable registry is reported as an empty swarm
            return {
                "n_blocks": client.n_blocks,
                "max_seq": client.ckpt.config.max_seq,
                "coverage": [0] * client.n_blocks,
                "bottleneck_throughput": 0.0,
                "servers": [],
            }

    @app.websocket("/api/v1/stream")
    async def stream(ws: WebSocket):
        offered = ws.scope.get("subprotocols") or []
        await ws.accept(subprotocol=WS_SUBPROTOCOL if WS_SUBPROTOCOL in offered else None)
        ip = ws.client.host if ws.client else "unknown"
        try:
            opening = await ws.receive_json()
        except WebSocketDisconnect:
            return
        try:
            req = GenerateRequest(**opening)
        except ValidationError as e:
            await ws.send_json({"type": "error", "code": 400, "message": str(e)})
            await ws.close()
            return
        if not cap.acquire(ip):
            await ws.send_json({"type": "error", "code": 429, "message": "too many concurrent sessions"})
            await ws.close()
            return

        loop = asyncio.get_running_loop()
        queue: asyncio.Queue = asyncio.Queue()

        def on_token(tok: int):
            loop.call_soon_threadsafe(queue.put_nowait, ("token", tok))

        def worker():
            try:
                result = _run_generation(client, req, on_token=on_token)
                loop.call_soon_threadsafe(queue.put_nowait, ("done", result))
            except NoRouteError as e:
                loop.call_soon_threadsafe(queue.put_nowait, ("error", (503, f"no route: blocks {e.missing_blocks}")))
            except Exception as e:  # noqa: BLE001 - report any failure to the consumer
                loop.call_soon_threadsafe(queue.put_nowait, ("error", (504, str(e))))

        thread = threading.Thread(target=worker, daemon=True)
        thread.start()
        try:
            while True:
                kind, value = await queue.get()
                if kind == "token":
                    await ws.send_json({"type": "token", "text": text_from_tokens([value])})
                elif kind == "done":
                    await ws.send_json({"type": "done", "steps_per_s": value["steps_per_s"]})
                    break
                else:
                    code, message = value
                    await ws.send_json({"type": "error", "code": code, "message": message})
                    break
            await ws.close()
        except WebSocketDisconnect:
            pass
        finally:
            cap.release(ip)

    if static_dir and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app
