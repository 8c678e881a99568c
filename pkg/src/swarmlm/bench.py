"""Benchmark and churn harness: launches registries/servers as real local
processes, measures inference and parallel-forward rates under shaped links,
runs scripted fault injection, and computes the analytic offloading bound.

Reports go to stdout plus JSON/CSV files, with matplotlib figures rendered
next to them.
"""

from __future__ import annotations

import csv
import json
import os
import statistics
import subprocess
import sys
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .allocation import BlockRange
from .client import DistributedModel, SwarmClient
from .errors import SwarmError
from .model import embed, lm_head, load_checkpoint, sample_next
from .transport import parse_shape

LAUNCH_TIMEOUT_S = 60.0


# -- process orchestration ----------------------------------------------------


class Proc:
    def __init__(self, args: list[str], label: str):
        self.label = label
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "swarmlm.cli", *args],
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
        )
        self.address: str | None = None
        self.server_id: str | None = None

    def wait_ready(self, timeout: float = LAUNCH_TIMEOUT_S):
        deadline = time.monotonic() + timeout
        result: list[str] = []

        def read():
            line = self.proc.stdout.readline()
            result.append(line)

        t = threading.Thread(target=read, daemon=True)
        t.start()
        t.join(max(0.0, deadline - time.monotonic()))
        if not result or not result[0].startswith("READY"):
            self.kill()
            raise SwarmError(f"{self.label} failed to start: {result[:1]}")
        parts = result[0].split()
        self.address = parts[1]
        if len(parts) > 2:
            self.server_id = parts[2]
        return self

    def terminate(self):
        """Graceful: SIGTERM lets servers announce their tombstone."""
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self.proc.kill()

    def kill(self):
        """Crash simulation."""
        if self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait()


class LocalSwarm:
    """A registry seed plus n server processes over loopback."""

    def __init__(
        self,
        checkpoint: str,
        n_servers: int,
        span: int | None = None,
        shape_spec: str | None = None,
        quantize: str = "none",
        measure_steps: int = 10,
        explicit_ranges: list[tuple[int, int]] | None = None,
        ttl_ms: int = 30000,
    ):
        self.checkpoint = checkpoint
        self.shape_spec = shape_spec
        ckpt = load_checkpoint(checkpoint)
        L = ckpt.config.n_layers
        self.registry = Proc(["registry", "--listen", "127.0.0.1:0"], "registry").wait_ready()
        self.bootstrap = [self.registry.address]
        if explicit_ranges is None:
            # uniform contiguous partition of [0, L) among the n servers
            span = span or -(-L // n_servers)
            explicit_ranges = []
            start = 0
            for i in range(n_servers):
                end = L if i == n_servers - 1 else min(L, start + span)
                explicit_ranges.append((start, end))
                start = end
        self.servers: list[Proc] = []
        for s, e in explicit_ranges:
            self.start_server((s, e), quantize, measure_steps, ttl_ms)

    def start_server(self, blocks: tuple[int, int], quantize="none", measure_steps=10, ttl_ms=30000) -> Proc:
        args = [
            "server",
            "--checkpoint", self.checkpoint,
            "--listen", "127.0.0.1:0",
            "--blocks", f"{blocks[0]}:{blocks[1]}",
            "--bootstrap", ",".join(self.bootstrap),
            "--quantize", quantize,
            "--measure-steps", str(measure_steps),
            "--ttl-ms", str(ttl_ms),
        ]
        if self.shape_spec:
            args += ["--shape", self.shape_spec]
        proc = Proc(args, f"server[{blocks[0]}:{blocks[1]}]").wait_ready()
        self.servers.append(proc)
        return proc

    def client(self, encoding=0) -> SwarmClient:
        return SwarmClient(self.checkpoint, self.bootstrap, shape=parse_shape(self.shape_spec), encoding=encoding)

    def stop(self):
        for p in self.servers:
            p.terminate()
        self.registry.terminate()


# -- measurements -------------------------------------------------------------


def time_steps(client: SwarmClient, prompt_len: int, n_tokens: int, seed_prompt: int = 7) -> list[float]:
    """Per-token step durations (prefill excluded)."""
    prompt = [(seed_prompt + i) % client.ckpt.config.vocab for i in range(prompt_len)]
    session = client.create_session(max_len=prompt_len + n_tokens)
    try:
        durations = []
        pending = prompt
        for step in range(n_tokens):
            t0 = time.monotonic()
            hidden = embed(client.ckpt, pending)
            hidden = session.step(hidden)
            logits = lm_head(client.ckpt, hidden)
            nxt = sample_next(logits[-1], "greedy")
            if step > 0:  # step 0 is the prefill
                durations.append(time.monotonic() - t0)
            pending = [nxt]
        return durations
    finally:
        session.close()


@dataclass
class BenchReport:
    scenario: str
    config: dict
    single_batch_steps_per_s: float
    parallel_forward_tokens_per_s: float
    per_client_slowdown: list[float] = field(default_factory=list)
    mean_slowdown: float = 0.0


def measure_forward_tokens_per_s(client: SwarmClient, batch: int, t: int) -> float:
    model = DistributedModel(client, parallel=True)
    d = client.ckpt.config.hidden
    x = np.zeros((batch, t, d), np.float32)
    t0 = time.monotonic()
    model.forward(x)
    return batch * t / max(time.monotonic() - t0, 1e-9)


def bench_inference(
    checkpoint: str,
    n_servers: int = 3,
    span: int | None = None,
    shape_spec: str | None = None,
    seq_len: int = 64,
    n_clients: int = 1,
    prompt_len: int = 8,
    forward_batch: int = 16,
    runs: int = 3,
) -> BenchReport:
    swarm = LocalSwarm(checkpoint, n_servers, span=span, shape_spec=shape_spec)
    try:
        client = swarm.client()
        rates = []
        for _ in range(runs):
            durs = time_steps(client, prompt_len, seq_len)
            rates.append(1.0 / statistics.median(durs))
        steps_per_s = statistics.median(rates)
        fwd_tps = measure_forward_tokens_per_s(client, forward_batch, prompt_len)

        slowdowns: list[float] = []
        if n_clients > 1:
            solo = statistics.median(time_steps(client, prompt_len, seq_len))
            results: list[float | None] = [None] * n_clients

            def worker(i):
                c = swarm.client()
                try:
                    results[i] = statistics.median(time_steps(c, prompt_len, seq_len))
                finally:
                    c.close()

            threads = [threading.Thread(target=worker, args=(i,)) for i in range(n_clients)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            slowdowns = [r / solo - 1.0 for r in results if r]
        client.close()
        return BenchReport(
            scenario=f"{n_servers} servers, shape={shape_spec or 'none'}",
            config={
                "servers": n_servers,
                "shaping": shape_spec,
                "seq_len": seq_len,
                "n_clients": n_clients,
                "prompt_len": prompt_len,
                "forward_batch": forward_batch,
            },
            single_batch_steps_per_s=steps_per_s,
            parallel_forward_tokens_per_s=fwd_tps,
            per_client_slowdown=slowdowns,
            mean_slowdown=float(np.mean(slowdowns)) if slowdowns else 0.0,
        )
    finally:
        swarm.stop()


def offload_upper_bound(params: float, bits: int, link_gbit_s: float) -> float:
    """Best-case seconds to stream every parameter across the host link once,
    assuming zero latency."""
    if params < 0 or bits <= 0 or link_gbit_s <= 0:
        raise SwarmError("offload inputs must be non-negative (params) / positive")
    total_bytes = params * bits / 8.0
    return total_bytes / (link_gbit_s * 1e9 / 8.0)


# -- churn --------------------------------------------------------------------


def churn_sim(scenario: dict, checkpoint: str) -> dict:
    """Run a scripted kill/start event list against a live local swarm while a
    client generates continuously."""
    events = sorted(scenario.get("events", []), key=lambda e: e["t_ms"])
    duration_ms = scenario.get("duration_ms", (events[-1]["t_ms"] + 5000) if events else 1000)
    gen = scenario.get("generate", {"prompt_len": 4, "max_new_tokens": 48})
    servers_spec = scenario.get("servers", [])
    swarm = LocalSwarm(
        checkpoint,
        n_servers=len(servers_spec) or 3,
        explicit_ranges=[tuple(s["blocks"]) for s in servers_spec] or None,
        ttl_ms=scenario.get("ttl_ms", 30000),
    )
    metrics = {
        "recoveries": 0,
        "failed_sessions": 0,
        "completed_sessions": 0,
        "recovery_times_s": [],
        "coverage_gap_durations_s": [],
        "events_executed": 0,
    }
    stop = threading.Event()
    client = swarm.client()

    def generator():
        ckpt = client.ckpt
        while not stop.is_set():
            try:
                session = client.create_session(max_len=gen["prompt_len"] + gen["max_new_tokens"])
                pending = list(range(1, gen["prompt_len"] + 1))
                for _ in range(gen["max_new_tokens"]):
                    if stop.is_set():
                        break
                    hidden = session.step(embed(ckpt, pending))
                    pending = [sample_next(lm_head(ckpt, hidden)[-1], "greedy")]
                metrics["recoveries"] += session.recoveries
                metrics["recovery_times_s"].extend(session.recovery_times)
                metrics["completed_sessions"] += 1
                session.close()
            except SwarmError:
                metrics["failed_sessions"] += 1
                time.sleep(0.2)

    def coverage_watcher():
        gap_started = None
        L = client.ckpt.config.n_layers
        while not stop.is_set():
            try:
                entries = client.lookup()
                covered = set()
                for e in entries:
                    covered.update(range(e.range.start, e.range.end))
                full = all(b in covered for b in range(L))
            except SwarmError:
                full = False
            now = time.monotonic()
            if not full and gap_started is None:
                gap_started = now
            elif full and gap_started is not None:
                metrics["coverage_gap_durations_s"].append(now - gap_started)
                gap_started = None
            stop.wait(0.2)
        if gap_started is not None:
            metrics["coverage_gap_durations_s"].append(time.monotonic() - gap_started)

    gen_thread = threading.Thread(target=generator, daemon=True)
    watch_thread = threading.Thread(target=coverage_watcher, daemon=True)
    t0 = time.monotonic()
    gen_thread.start()
    watch_thread.start()
    try:
        for ev in events:
            delay = ev["t_ms"] / 1000.0 - (time.monotonic() - t0)
            if delay > 0:
                time.sleep(delay)
            action = ev["action"]
            if action == "kill":
                idx = ev["server"]
                swarm.servers[idx].kill()
            elif action == "start":
                swarm.start_server(tuple(ev["blocks"]))
            else:
                raise SwarmError(f"unsupported churn action {action!r}")
            metrics["events_executed"] += 1
        remaining = duration_ms / 1000.0 - (time.monotonic() - t0)
        if remaining > 0:
            time.sleep(remaining)
    finally:
        stop.set()
        gen_thread.join(timeout=30)
        watch_thread.join(timeout=5)
        client.close()
        swarm.stop()
    return metrics


# -- table + report emission ---------------------------------------------------


def bench_table(
    checkpoint: str,
    n_servers: int = 3,
    span: int | None = None,
    out_dir: str = "bench_out",
    shapes: tuple = (None, "2:1000", "2:100", "50:100"),
    seq_lens: tuple = (128, 2048),
    batches: tuple = (1, 64),
    prompt_len: int = 8,
) -> list[dict]:
    """Grid of shaping rows x sequence lengths (inference steps/s) x batch
    sizes (parallel forward tokens/s)."""
    rows = []
    ckpt = load_checkpoint(checkpoint)
    for shape_spec in shapes:
        swarm = LocalSwarm(checkpoint, n_servers, span=span, shape_spec=shape_spec)
        try:
            client = swarm.client()
            row = {"shaping": shape_spec or "unshaped"}
            for seq in seq_lens:
                n = min(seq, max(4, ckpt.config.max_seq - prompt_len - 1))
                durs = time_steps(client, prompt_len, n)
                row[f"inference_steps_per_s_seq{seq}"] = 1.0 / statistics.median(durs)
            for b in batches:
                row[f"forward_tokens_per_s_batch{b}"] = measure_forward_tokens_per_s(client, b, prompt_len)
            client.close()
            rows.append(row)
        finally:
            swarm.stop()
    _write_table_outputs(rows, out_dir)
    return rows


def format_table(rows: list[dict]) -> str:
    if not rows:
        return "(empty)"
    cols = list(rows[0].keys())
    widths = [max(len(c), *(len(f"{r[c]:.3f}") if isinstance(r[c], float) else len(str(r[c])) for r in rows)) for c in cols]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    for r in rows:
        lines.append("  ".join(
            (f"{r[c]:.3f}" if isinstance(r[c], float) else str(r[c])).ljust(w) for c, w in zip(cols, widths)
        ))
    return "\n".join(lines)


def _write_table_outputs(rows: list[dict], out_dir: str):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench_table.json", "w") as f:
        json.dump(rows, f, indent=2)
    if rows:
        with open(out / "bench_table.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    _render_table_figure(rows, out / "bench_table.png")


def _render_table_figure(rows: list[dict], path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not rows:
        return
    labels = [r["shaping"] for r in rows]
    metrics = [k for k in rows[0] if k != "shaping"]
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.2), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        ax.bar(labels, [r[metric] for r in rows], color="#7a5195")
        ax.set_title(metric, fontsize=8)
        ax.tick_params(axis="x", rotation=30, labelsize=7)
        ax.set_ylabel("rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(report: BenchReport, out_path: str | None):
    data = asdict(report)
    print(json.dumps(data, indent=2))
    if out_path:
        with open(out_path, "w") as f:
            json.dump(data, f, indent=2)
        base = Path(out_path).with_suffix("")
        with open(f"{base}.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["metric", "value"])
            writer.writerow(["single_batch_steps_per_s", report.single_batch_steps_per_s])
            writer.writerow(["parallel_forward_tokens_per_s", report.parallel_forward_tokens_per_s])
            writer.writerow(["mean_slowdown", report.mean_slowdown])
        _render_report_figure(report, Path(f"{base}.png"))


def _render_report_figure(report: BenchReport, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    names = ["inference steps/s", "forward tokens/s"]
    values = [report.single_batch_steps_per_s, report.parallel_forward_tokens_per_s]
    ax.bar(names, values, color=["#003f5c", "#ffa600"])
    ax.set_title(report.scenario, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
