"""Live round trip for the chat UI bundle: the gateway serves the built
static assets, a prompt streams token frames end to end, and the swarm panel
endpoint reflects a server kill within two 5-second poll periods."""

import time
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from swarmlm.gateway import build_app
from swarmlm.model import ModelConfig, gen_checkpoint, save_checkpoint

from conftest import InProcSwarm

DIST = Path(__file__).resolve().parent.parent / "frontend" / "dist"

pytestmark = pytest.mark.skipif(
    not (DIST / "index.html").exists(),
    reason="frontend bundle not built (run `npm run build` in frontend/)",
)

CFG = ModelConfig(n_layers=2, hidden=16, n_heads=2, vocab=256, max_seq=64)
POLL_PERIOD_S = 5.0


@pytest.fixture
def live(tmp_path):
    ckpt = gen_checkpoint(42, CFG)
    path = tmp_path / "ui.ptck"
    save_checkpoint(ckpt, str(path))
    sw = InProcSwarm(ckpt, str(path))
    sw.add_server((0, 1), ttl_ms=2500)
    sw.add_server((1, 2), ttl_ms=2500)
    client = sw.client()
    app = build_app(client, static_dir=str(DIST))
    with TestClient(app) as tc:
        yield tc, sw
    client.close()
    sw.stop()


def test_bundle_served_from_root(live):
    tc, _ = live
    index = tc.get("/")
    assert index.status_code == 200
    assert "main.js" in index.text
    assert tc.get("/main.js").status_code == 200
    assert tc.get("/style.css").status_code == 200


def test_prompt_round_trip_streams_tokens(live):
    tc, _ = live
    with tc.websocket_connect("/api/v1/stream", subprotocols=["petal-stream-v1"]) as ws:
        ws.send_json({"prompt": "user: hi\nmodel:", "max_new_tokens": 6})
        text, done = "", None
        while done is None:
            frame = ws.receive_json()
            if frame["type"] == "token":
                text += frame["text"]
            else:
                done = frame
    assert done["type"] == "done"
    assert done["steps_per_s"] > 0
    assert len(text) == 6  # one latin-1 char per generated token


def test_swarm_panel_reflects_kill_within_two_poll_periods(live):
    tc, sw = live
    assert len(tc.get("/api/v1/swarm").json()["servers"]) == 2
    sw.servers[1].kill()  # abrupt: visible only through TTL expiry
    deadline = time.monotonic() + 2 * POLL_PERIOD_S
    while True:
        body = tc.get("/api/v1/swarm").json()
        if len(body["servers"]) == 1:
            break
        assert time.monotonic() < deadline, "kill not reflected within 2 poll periods"
        time.sleep(0.5)
    assert body["coverage"].count(0) >= 1
    assert body["bottleneck_throughput"] == 0.0
