"""Unified command line: checkpoint generation, registry seed, server node,
gateway, and the benchmark/churn harnesses.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading

from .errors import InputError, SwarmError
from .transport import parse_shape

log = logging.getLogger(__name__)


def _parse_blocks(value: str):
    if value == "auto":
        return "auto"
    try:
        s, e = value.split(":")
        return (int(s), int(e))
    except ValueError as exc:
        raise InputError(f"--blocks wants auto or start:end, got {value!r}") from exc


def _parse_listen(value: str):
    host, port = value.rsplit(":", 1)
    return host, int(port)


def _bootstrap_list(value: str | None):
    return [p for p in (value or "").split(",") if p]


def _shape_arg(args):
    return parse_shape(getattr(args, "shape", None) or os.environ.get("SWARM_SHAPE"))


def cmd_genmodel(args) -> int:
    from .model import ModelConfig, gen_checkpoint, save_checkpoint

    config = ModelConfig(args.layers, args.hidden, args.heads, args.vocab, args.max_seq, args.mlp_ratio)
    save_checkpoint(gen_checkpoint(args.seed, config), args.out)
    print(f"wrote checkpoint {args.out} (L={args.layers} d={args.hidden} h={args.heads} V={args.vocab})")
    return 0


def cmd_registry(args) -> int:
    from .registry import RegistrySeed

    host, port = _parse_listen(args.listen)
    done, cleanups = _signal_gate()
    seed = RegistrySeed(host, port).start()
    cleanups.append(seed.stop)
    print(f"READY {seed.address}", flush=True)
    done.wait()
    return 0


def cmd_server(args) -> int:
    from .server import ServerConfig, ServerNode

    host, port = _parse_listen(args.listen)
    config = ServerConfig(
        checkpoint_path=args.checkpoint,
        host=host,
        port=port,
        blocks=_parse_blocks(args.blocks),
        span=args.span,
        quantize=args.quantize,
        bootstrap=_bootstrap_list(args.bootstrap),
        shape=_shape_arg(args),
        capacity=args.capacity,
        measure_steps=args.measure_steps,
        ttl_ms=args.ttl_ms,
    )
    # handlers must be live before READY is printed: a SIGTERM that lands
    # right after READY has to run the graceful (tombstone-announcing) path
    done, cleanups = _signal_gate()
    try:
        node = ServerNode(config).start()
    except (SwarmError, OSError) as e:
        print(f"startup failed: {e}", file=sys.stderr)
        return 1
    cleanups.append(node.stop)  # SIGTERM announces the offline tombstone
    print(f"READY {node.address} {node.server_id}", flush=True)
    done.wait()
    return 0


def cmd_gateway(args) -> int:
    import uvicorn

    from .client import SwarmClient
    from .gateway import build_app

    host, port = _parse_listen(args.listen)
    client = SwarmClient(args.checkpoint, _bootstrap_list(args.bootstrap), shape=_shape_arg(args))
    app = build_app(client, static_dir=args.static_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return 0


def cmd_bench(args) -> int:
    from . import bench

    report = bench.bench_inference(
        checkpoint=args.checkpoint,
        n_servers=args.servers,
        span=args.span,
        shape_spec=args.shape,
        seq_len=args.seq_len,
        n_clients=args.clients,
        prompt_len=args.prompt_len,
    )
    bench.emit_report(report, args.out)
    return 0


def cmd_bench_table(args) -> int:
    from . import bench

    table = bench.bench_table(checkpoint=args.checkpoint, n_servers=args.servers, span=args.span, out_dir=args.out_dir)
    print(bench.format_table(table))
    return 0


def cmd_churn(args) -> int:
    from . import bench

    with open(args.script) as f:
        scenario = json.load(f)
    metrics = bench.churn_sim(scenario, checkpoint=args.checkpoint)
    out = json.dumps(metrics, indent=2)
    print(out)
    if args.out:
        with open(args.out, "w") as f:
            f.write(out)
    return 0


def cmd_offload_bound(args) -> int:
    from .bench import offload_upper_bound

    seconds = offload_upper_bound(args.params, args.bits, args.link)
    print(f"{seconds:.6g} s per full-model pass")
    return 0


def _signal_gate():
    """Install SIGTERM/SIGINT handlers now; register cleanups afterwards."""
    done = threading.Event()
    cleanups: list = []

    def handler(signum, frame):
        for fn in cleanups:
            fn()
        done.set()

    signal.signal(signal.SIGTERM, handler)
    signal.signal(signal.SIGINT, handler)
    return done, cleanups


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swarm", description="decentralized toy-transformer swarm")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("genmodel", help="generate a deterministic checkpoint")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--layers", type=int, required=True)
    g.add_argument("--hidden", type=int, required=True)
    g.add_argument("--heads", type=int, required=True)
    g.add_argument("--vocab", type=int, required=True)
    g.add_argument("--max-seq", type=int, required=True)
    g.add_argument("--mlp-ratio", type=int, default=4)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_genmodel)

    r = sub.add_parser("registry", help="standalone bootstrap registry seed")
    r.add_argument("--listen", default="127.0.0.1:0")
    r.set_defaults(func=cmd_registry)

    s = sub.add_parser("server", help="serve a contiguous block range")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--listen", default="127.0.0.1:0")
    s.add_argument("--blocks", default="auto", help="auto or start:end")
    s.add_argument("--span", type=int, default=None, help="span for the auto policy")
    s.add_argument("--bootstrap", default="", help="host:port[,host:port...]")
    s.add_argument("--quantize", choices=["none", "activations", "weights", "both"], default="none")
    s.add_argument("--shape", default=None, help="latency_ms:bandwidth_mbps")
    s.add_argument("--capacity", type=int, default=64)
    s.add_argument("--measure-steps", type=int, default=100)
    s.add_argument("--ttl-ms", type=int, default=30000)
    s.set_defaults(func=cmd_server)

    w = sub.add_parser("gateway", help="HTTP/WebSocket generation service")
    w.add_argument("--listen", default="127.0.0.1:8080")
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--bootstrap", default="")
    w.add_argument("--shape", default=None)
    w.add_argument("--static-dir", default=None)
    w.set_defaults(func=cmd_gateway)

    b = sub.add_parser("bench", help="measure inference over a local swarm")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--servers", type=int, default=3)
    b.add_argument("--span", type=int, default=None)
    b.add_argument("--shape", default=None)
    b.add_argument("--seq-len", type=int, default=64)
    b.add_argument("--prompt-len", type=int, default=8)
    b.add_argument("--clients", type=int, default=1)
    b.add_argument("--out", default=None, help="report JSON path")
    b.set_defaults(func=cmd_bench)

    bt = sub.add_parser("bench-table", help="grid of shaping x sequence x batch")
    bt.add_argument("--checkpoint", required=True)
    bt.add_argument("--servers", type=int, default=3)
    bt.add_argument("--span", type=int, default=None)
    bt.add_argument("--out-dir", default="bench_out")
    bt.set_defaults(func=cmd_bench_table)

    c = sub.add_parser("churn", help="scripted kill/start scenario")
    c.add_argument("--script", required=True)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_churn)

    o = sub.add_parser("offload-bound", help="analytic offloading upper bound")
    o.add_argument("--params", type=float, required=True)
    o.add_argument("--bits", type=int, required=True)
    o.add_argument("--link", type=float, required=True, help="Gbit/s")
    o.set_defaults(func=cmd_offload_bound)

    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SWARM_LOG", "WARNING"))
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SwarmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def genmodel_entry(argv=None) -> int:
    """`genmodel ...` == `swarm genmodel ...`."""
    return main(["genmodel"] + (argv if argv is not None else sys.argv[1:]))


if __name__ == "__main__":
    sys.exit(main())
