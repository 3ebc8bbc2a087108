"""Command-line entry point: ``fusedce {verify,bench,demo}``.

Exit codes: 0 success, 1 verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .core import default_workers, effective_gamma
from .errors import FusedCEError
from .forward import fused_forward
from .stats import stream_stats
from .verify import run_all

DEMO_CAPS = {"bt": 8, "vocab": 16, "hidden": 8}


class UsageError(Exception):
    pass


def _positive_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"values must be positive integers, got {text!r}")
    return values


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--hidden", type=_positive_int, help="hidden size d")
    common.add_argument("--bt", type=_positive_list, help="B*T value(s), comma separated")
    common.add_argument("--vocab", type=_positive_list, help="vocabulary size(s), comma separated")
    common.add_argument("--precision", choices=["f32", "f64", "bf16"], default="f32")
    common.add_argument("--reduction", choices=["mean", "sum", "none"], default="mean")
    common.add_argument("--window", type=_positive_int, help="vocabulary window size (default: vocab)")
    common.add_argument("--ranks", type=_positive_int, default=1)
    common.add_argument("--parallel-mode", choices=["dp", "tp", "sp"])
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--repeats", type=_positive_int, default=5)
    common.add_argument("--warmup", type=_non_negative_int, default=2)
    common.add_argument("--format", choices=["csv", "markdown", "plotdata"], default="csv")
    common.add_argument("--output", type=Path, help="output path (directory for plotdata)")
    common.add_argument("--workers", type=_positive_int, default=default_workers())

    parser = argparse.ArgumentParser(prog="fusedce", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("verify", parents=[common], help="run the equivalence suites")
    b = sub.add_parser("bench", parents=[common], help="latency / memory sweep")
    b.add_argument(
        "--methods", default="CANONICAL,FUSED",
        help=f"comma separated subset of {[m.value for m in bench_mod.Method]}",
    )
    b.add_argument("--forward-only", action="store_true")
    d = sub.add_parser("demo", parents=[common], help="print the streaming trace for one position")
    d.add_argument("--position", type=int, default=0)
    d.add_argument("--hidden-states", help="JSON list of rows for H")
    d.add_argument("--weights", help="JSON list of rows for W")
    d.add_argument("--targets", help="JSON list of target indices")
    return parser


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _deliver(data: bytes, output: Path | None) -> None:
    if output is None:
        sys.stdout.write(data.decode("utf-8"))
        sys.stdout.flush()
    else:
        _atomic_write(output, data)


def cmd_verify(args) -> int:
    kwargs = {}
    if args.bt:
        kwargs["max_n"] = max(args.bt)
    if args.vocab:
        kwargs["max_v"] = max(args.vocab)
    if args.hidden:
        kwargs["max_d"] = args.hidden
    results = run_all(
        args.precision, args.seed, args.ranks, args.parallel_mode, args.window,
        args.workers, **kwargs,
    )
    report = "\n".join(r.line() for r in results) + "\n"
    failed = [r for r in results if not r.passed]
    report += (
        f"verification failed: first failing suite is {failed[0].name}\n" if failed
        else f"all {len(results)} suites passed\n"
    )
    _deliver(report.encode("utf-8"), args.output)
    if args.output is not None:
        sys.stdout.write(report)
    return 1 if failed else 0


def cmd_bench(args) -> int:
    try:
        methods = tuple(bench_mod.Method(m.strip().upper()) for m in args.methods.split(",") if m.strip())
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = bench_mod.BenchConfig(
        bt_values=tuple(args.bt or (1024, 4096)),
        vocab_values=tuple(args.vocab or (8192, 32768)),
        methods=methods,
        hidden=args.hidden or 256,
        precision=args.precision,
        window_size=args.window,
        reduction=bench_mod.Reduction(args.reduction),
        repeats=args.repeats,
        warmup=args.warmup,
        seed=args.seed,
        workers=args.workers,
        forward_only=args.forward_only,
    )
    if args.window is not None and any(args.window > v for v in cfg.vocab_values):
        raise UsageError(f"--window {args.window} exceeds a vocab size in {list(cfg.vocab_values)}")
    try:
        cases = cfg.cases()
    except FusedCEError as exc:
        raise UsageError(str(exc)) from None

    def progress(rec):
        print(
            f"{rec.method.value:<18} bt={rec.bt:<6} V={rec.vocab:<7} "
            f"{rec.latency_s * 1e3:9.2f} ms  {rec.aux_peak_bytes / 2**20:9.2f} MB",
            file=sys.stderr,
        )

    print(f"running {len(cases)} cases with {args.workers} worker(s)", file=sys.stderr)
    records = bench_mod.sweep(cfg, progress)
    if args.format == "plotdata" and args.output is not None:
        for path in bench_mod.write_plotdata(records, args.output):
            print(path, file=sys.stderr)
    else:
        _deliver(bench_mod.emit(records, args.format), args.output)
    return 0


def _parse_json_matrix(text: str, name: str) -> np.ndarray:
    try:
        arr = np.asarray(json.loads(text), dtype=np.float64)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"--{name}: {exc}") from None
    if arr.ndim != 2:
        raise UsageError(f"--{name} must be a list of rows")
    return arr


def _demo_instance(args):
    if args.hidden_states or args.weights or args.targets:
        if not (args.hidden_states and args.weights and args.targets):
            raise UsageError("--hidden-states, --weights and --targets must be given together")
        H = _parse_json_matrix(args.hidden_states, "hidden-states")
        W = _parse_json_matrix(args.weights, "weights")
        try:
            Y = np.asarray(json.loads(args.targets), dtype=np.int64)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"--targets: {exc}") from None
        return H, W, Y
    N = args.bt[0] if args.bt else 2
    V = args.vocab[0] if args.vocab else 8
    d = args.hidden or 4
    for name, value in (("bt", N), ("vocab", V), ("hidden", d)):
        if value > DEMO_CAPS[name]:
            raise UsageError(f"demo caps --{name} at {DEMO_CAPS[name]}, got {value}")
    rng = np.random.default_rng(args.seed)
    H = rng.normal(size=(N, d)).round(3)
    W = rng.normal(size=(V, d)).round(3)
    Y = rng.integers(0, V, size=N)
    return H, W, Y


def cmd_demo(args) -> int:
    H, W, Y = _demo_instance(args)
    N, d = H.shape
    V = W.shape[0]
    for name, value in (("bt", N), ("vocab", V), ("hidden", d)):
        if value > DEMO_CAPS[name]:
            raise UsageError(f"demo caps {name} at {DEMO_CAPS[name]}, got {value}")
    if W.shape[1] != d or Y.shape != (N,):
        raise UsageError(f"shapes disagree: H{H.shape}, W{W.shape}, targets{Y.shape}")
    if np.any((Y < 0) | (Y >= V)):
        raise UsageError(f"targets must lie in [0, {V}), got {Y.tolist()}")
    if not 0 <= args.position < N:
        raise UsageError(f"--position must be in [0, {N})")
    n, y = args.position, int(Y[args.position])

    lines = [f"position {n}: target y={y}, d={d}, V={V}", "forward (online softmax):"]

    def on_update(v, z, m, a):
        lines.append(f"  v={v:<3d} z={z: .7f}  m={m: .7f}  a={a:.7f}")

    st = stream_stats(H[n], W, y, on_update=on_update)
    # written as lse - z so a single logit gives +0, not -0
    loss_n = (st.m + math.log(st.a)) - st.z_target
    lines.append(f"final: m={st.m:.7f} a={st.a:.7f} z_target={st.z_target:.7f}")
    lines.append(f"loss = -(z_target - (m + log a)) = {loss_n:.10g}")

    reduction = args.reduction
    gamma = 1.0 if reduction == "none" else effective_gamma(1.0, reduction, N)
    lines.append(f"backward (upstream 1, reduction {reduction}, gamma={gamma:.7g}):")
    dh = np.zeros(d)
    for v in range(V):
        z = float(H[n] @ W[v])
        p = math.exp(z - st.m) / st.a
        g = gamma * (p - (1.0 if v == y else 0.0))
        dh += g * W[v]
        lines.append(f"  v={v:<3d} p={p:.7f}  g={g: .7f}")
    lines.append("dH[{}] = [{}]".format(n, ", ".join(f"{x:.7g}" for x in dh)))
    total = fused_forward(H, W, Y, reduction, "f64", workers=1).loss
    if reduction == "none":
        lines.append("all losses = [{}]".format(", ".join(f"{x:.7g}" for x in total)))
    else:
        lines.append(f"{reduction} loss over {N} position(s) = {total:.10g}")
    _deliver(("\n".join(lines) + "\n").encode("utf-8"), args.output)
    return 0


COMMANDS = {"verify": cmd_verify, "bench": cmd_bench, "demo": cmd_demo}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fusedce {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
