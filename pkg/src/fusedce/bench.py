"""Latency and ledger-memory comparison of the canonical and fused paths.

Memory is the peak of a :class:`~fusedce.core.MemoryLedger`, not an OS
sample, so ``aux_peak_bytes`` is exact and identical across runs. Latency is
the median wall-clock time of ``repeats`` runs after ``warmup`` discarded ones.
"""

from __future__ import annotations

import csv
import enum
import io
import itertools
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backward import fused_backward_recompute, fused_forward_with_partial_grads
from .core import MemoryLedger, PrecisionMode, Reduction, default_workers
from .errors import EmptyGridError, EmptyInputError
from .forward import WindowConfig, fused_forward, fused_forward_windowed
from .reference import reference_backward, reference_loss


class Method(str, enum.Enum):
    CANONICAL = "CANONICAL"
    FUSED = "FUSED"
    FUSED_WINDOWED = "FUSED_WINDOWED"
    FUSED_PARTIAL_GRAD = "FUSED_PARTIAL_GRAD"


class Format(str, enum.Enum):
    CSV = "csv"
    MARKDOWN = "markdown"
    PLOTDATA = "plotdata"


CSV_HEADER = [
    "bt", "vocab", "hidden", "method", "precision",
    "latency_s", "latency_min_s", "latency_max_s", "aux_peak_bytes", "loss",
]

# column labels used by the markdown table
_LABELS = {
    Method.CANONICAL: "Canonical",
    Method.FUSED: "Proposed",
    Method.FUSED_WINDOWED: "Proposed (windowed)",
    Method.FUSED_PARTIAL_GRAD: "Proposed (partial grad)",
}


@dataclass(frozen=True)
class BenchCase:
    bt: int
    vocab: int
    hidden: int = 256
    method: Method = Method.FUSED
    precision: str = "f32"
    window_size: int | None = None
    reduction: Reduction = Reduction.MEAN
    repeats: int = 5
    warmup: int = 2
    seed: int = 42
    workers: int | None = None
    forward_only: bool = False

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if min(self.bt, self.vocab, self.hidden) < 1:
            raise ValueError("bt, vocab and hidden must be positive")


@dataclass(frozen=True)
class BenchConfig:
    bt_values: tuple[int, ...] = (1024, 4096)
    vocab_values: tuple[int, ...] = (8192, 32768)
    methods: tuple[Method, ...] = (Method.CANONICAL, Method.FUSED)
    hidden: int = 256
    precision: str = "f32"
    window_size: int | None = None
    reduction: Reduction = Reduction.MEAN
    repeats: int = 5
    warmup: int = 2
    seed: int = 42
    workers: int | None = None
    forward_only: bool = False

    def cases(self) -> list[BenchCase]:
        """Grid points in row-major (bt, vocab, method) order."""
        if not self.bt_values or not self.vocab_values or not self.methods:
            raise EmptyGridError("bench grid needs at least one bt, vocab and method")
        return [
            BenchCase(
                bt, vocab, self.hidden, Method(method), self.precision, self.window_size,
                Reduction(self.reduction), self.repeats, self.warmup, self.seed, self.workers,
                self.forward_only,
            )
            for bt, vocab, method in itertools.product(self.bt_values, self.vocab_values, self.methods)
        ]


@dataclass
class BenchRecord:
    bt: int
    vocab: int
    hidden: int
    method: Method
    precision: str
    latency_s: float
    latency_min_s: float
    latency_max_s: float
    aux_peak_bytes: int
    loss: float
    workers: int = 1
    peak_by_tag: dict = field(default_factory=dict, repr=False)


def make_instance(bt: int, vocab: int, hidden: int, seed: int):
    """Uniform(-1/sqrt(d), 1/sqrt(d)) hidden states and weights, uniform targets.

    The generator is keyed on (seed, bt, vocab, hidden) so every method at a
    grid point sees the same instance regardless of sweep order.
    """
    rng = np.random.default_rng([seed, bt, vocab, hidden])
    bound = 1.0 / np.sqrt(hidden)
    H = rng.uniform(-bound, bound, size=(bt, hidden)).astype(np.float32)
    W = rng.uniform(-bound, bound, size=(vocab, hidden)).astype(np.float32)
    Y = rng.integers(0, vocab, size=bt)
    return H, W, Y


def _run_once(case: BenchCase, H, W, Y, ledger: MemoryLedger, workers: int) -> float:
    prec = PrecisionMode.parse(case.precision)
    red = case.reduction
    if case.method is Method.CANONICAL:
        loss = reference_loss(H, W, Y, red, prec, ledger=ledger)
        if not case.forward_only:
            reference_backward(H, W, Y, red, 1.0, prec, ledger=ledger)
        return float(loss)

    if case.method is Method.FUSED_PARTIAL_GRAD:
        if case.forward_only:
            return float(fused_forward(H, W, Y, red, prec, ledger=ledger, workers=workers).loss)
        out = fused_forward_with_partial_grads(H, W, Y, red, prec, ledger=ledger, workers=workers)
        out.gradients(1.0)
        return float(out.loss)

    if case.method is Method.FUSED_WINDOWED:
        cfg = WindowConfig(case.window_size or case.vocab, workers)
        out = fused_forward_windowed(H, W, Y, red, cfg, prec, ledger=ledger)
    else:
        out = fused_forward(H, W, Y, red, prec, ledger=ledger, workers=workers)
    if not case.forward_only:
        upstream = np.ones(case.bt) if red is Reduction.NONE else 1.0
        # the stats cache stays alive between forward and backward
        with ledger.hold(out.stats.nbytes, "stats"):
            fused_backward_recompute(H, W, Y, out, upstream, red, prec, ledger=ledger, workers=workers)
    return float(np.sum(out.loss)) if red is Reduction.NONE else float(out.loss)


def run_case(case: BenchCase, instance=None) -> BenchRecord:
    """Time one grid point and record its ledger peak and loss."""
    H, W, Y = instance if instance is not None else make_instance(
        case.bt, case.vocab, case.hidden, case.seed
    )
    workers = default_workers() if case.workers is None else case.workers
    times, peaks = [], set()
    loss = float("nan")
    ledger = MemoryLedger()
    for i in range(case.warmup + case.repeats):
        ledger = MemoryLedger()
        start = time.perf_counter()
        loss = _run_once(case, H, W, Y, ledger, workers)
        elapsed = time.perf_counter() - start
        peaks.add(ledger.peak_bytes)
        if i >= case.warmup:
            times.append(elapsed)
    if len(peaks) != 1:
        raise RuntimeError(f"ledger peak varied across repeats: {sorted(peaks)}")
    return BenchRecord(
        case.bt, case.vocab, case.hidden, case.method, PrecisionMode.parse(case.precision).name,
        statistics.median(times), min(times), max(times), peaks.pop(), loss, workers,
        dict(ledger.peak_by_tag),
    )


def sweep(cfg: BenchConfig, progress=None) -> list[BenchRecord]:
    """Run every case of the grid sequentially, in row-major order."""
    records = []
    instance_key, instance = None, None
    for case in cfg.cases():
        key = (case.bt, case.vocab)
        if key != instance_key:
            instance_key, instance = key, make_instance(case.bt, case.vocab, case.hidden, case.seed)
        records.append(run_case(case, instance))
        if progress is not None:
            progress(records[-1])
    return records


def loss_crosscheck(records: list[BenchRecord]) -> float:
    """Largest relative loss gap between any fused record and its canonical twin."""
    canonical = {(r.bt, r.vocab): r.loss for r in records if r.method is Method.CANONICAL}
    worst = 0.0
    for r in records:
        ref = canonical.get((r.bt, r.vocab))
        if r.method is not Method.CANONICAL and ref is not None:
            worst = max(worst, abs(r.loss - ref) / max(abs(ref), 1e-30))
    return worst


def _csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow([
            r.bt, r.vocab, r.hidden, r.method.value, r.precision,
            f"{r.latency_s:.6e}", f"{r.latency_min_s:.6e}", f"{r.latency_max_s:.6e}",
            r.aux_peak_bytes, repr(float(r.loss)),
        ])
    return buf.getvalue()


def _markdown(records) -> str:
    methods = list(dict.fromkeys(r.method for r in records))
    by_point: dict[tuple[int, int], dict[Method, BenchRecord]] = {}
    for r in records:
        by_point.setdefault((r.bt, r.vocab), {})[r.method] = r
    labels = [_LABELS[m] for m in methods]
    header = ["B×T", "V"] + [f"Latency (ms) {l}" for l in labels] + [f"Memory (MB) {l}" for l in labels]
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join([":---:"] * 2 + ["---:"] * (2 * len(methods))) + "|",
    ]
    last_bt = None
    for (bt, vocab), row in by_point.items():
        cells = [f"{bt}" if bt != last_bt else "", f"{vocab:,}"]
        cells += [f"{row[m].latency_s * 1e3:.2f}" if m in row else "-" for m in methods]
        cells += [f"{row[m].aux_peak_bytes / 2**20:.2f}" if m in row else "-" for m in methods]
        lines.append("| " + " | ".join(cells) + " |")
        last_bt = bt
    return "\n".join(lines) + "\n"


def plot_series(records) -> dict[str, str]:
    """One whitespace-separated series per (method, bt), keyed by vocab."""
    groups: dict[tuple[Method, int], list[BenchRecord]] = {}
    for r in records:
        groups.setdefault((r.method, r.bt), []).append(r)
    out = {}
    for (method, bt), rows in groups.items():
        text = [
            f"# method={method.value} bt={bt} hidden={rows[0].hidden} precision={rows[0].precision}",
            "# vocab latency_ms latency_min_ms latency_max_ms aux_peak_mb",
        ]
        for r in sorted(rows, key=lambda r: r.vocab):
            text.append(
                f"{r.vocab} {r.latency_s * 1e3:.6f} {r.latency_min_s * 1e3:.6f} "
                f"{r.latency_max_s * 1e3:.6f} {r.aux_peak_bytes / 2**20:.6f}"
            )
        out[f"{method.value.lower()}_bt{bt}.dat"] = "\n".join(text) + "\n"
    return out


def emit(records: list[BenchRecord], fmt: Format | str = Format.CSV) -> bytes:
    """Serialise records as CSV, a grouped latency and memory markdown table, or plot data.

    Plot data is every series back to back, separated by two blank lines
    (gnuplot ``index`` blocks); :func:`write_plotdata` writes them as files.
    """
    if not records:
        raise EmptyInputError("no benchmark records to emit")
    fmt = Format(fmt)
    if fmt is Format.CSV:
        text = _csv(records)
    elif fmt is Format.MARKDOWN:
        text = _markdown(records)
    else:
        text = "\n\n".join(plot_series(records).values())
    return text.encode("utf-8")


def write_plotdata(records: list[BenchRecord], directory: str | Path) -> list[Path]:
    if not records:
        raise EmptyInputError("no benchmark records to emit")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in plot_series(records).items():
        path = directory / name
        tmp = path.with_suffix(".tmp")
        tmp.write_text(text)
        tmp.replace(path)
        paths.append(path)
    return paths


__all__ = [
    "BenchCase", "BenchConfig", "BenchRecord", "CSV_HEADER", "Format", "Method",
    "emit", "loss_crosscheck", "make_instance", "run_case", "sweep", "write_plotdata",
]
