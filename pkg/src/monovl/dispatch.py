"""Modality-routed expert execution.

Three interchangeable strategies apply a (visual, textual) expert pair to the
rows of ``x`` selected by a boolean modality mask (True = visual):

* ``naive``: both experts over every row, then a masked select.
* ``gather_scatter``: index lists per modality, gather, dense expert, scatter.
  This is the correctness reference.
* ``fused``: the sequence is tiled into blocks and every block gets one visual
  and one textual task.  A task whose modality is absent from its block exits
  immediately; otherwise it processes its own rows in place.

All three call the same compiled per-row kernels, so outputs are bitwise equal.
"""

from __future__ import annotations

import csv
import enum
import gc
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .exceptions import DimensionError, InputError

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 128


class Strategy(str, enum.Enum):
    NAIVE = "naive"
    GATHER_SCATTER = "gather_scatter"
    FUSED_BLOCKED = "fused"


class OpKind(str, enum.Enum):
    LINEAR = "linear"
    MLP = "mlp"


@dataclass(frozen=True)
class Block:
    start: int
    end: int
    has_visual: bool
    has_textual: bool


@dataclass
class DispatchPlan:
    block_size: int
    n_tokens: int
    starts: np.ndarray
    ends: np.ndarray
    has_visual: np.ndarray
    has_textual: np.ndarray
    strategy: Strategy = Strategy.FUSED_BLOCKED
    # token indices grouped per block, visual rows first; block b's visual rows are
    # row_order[starts[b]:split[b]] and its textual rows row_order[split[b]:ends[b]]
    row_order: np.ndarray | None = field(default=None, repr=False)
    split: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_blocks(self):
        return len(self.starts)

    @property
    def blocks(self):
        return [Block(int(s), int(e), bool(v), bool(t)) for s, e, v, t in
                zip(self.starts, self.ends, self.has_visual, self.has_textual)]

    @property
    def n_mixed(self):
        return int(np.count_nonzero(self.has_visual & self.has_textual))

    @property
    def co_occurrence(self):
        """Share of blocks that contain both modalities."""
        return self.n_mixed / self.n_blocks if self.n_blocks else 0.0

    def straddled_tokens(self):
        """Tokens living in mixed blocks."""
        mixed = self.has_visual & self.has_textual
        return int((self.ends[mixed] - self.starts[mixed]).sum())


def as_mask(mask, n=None):
    """Normalise a modality mask to a 1-D bool array (True = visual).

    Accepts bools/ints or the letters ``"V"``/``"T"``.
    """
    if isinstance(mask, str):
        mask = list(mask.replace(" ", ""))
    arr = np.asarray(mask)
    if arr.dtype.kind in "US":
        bad = set(np.unique(arr)) - {"V", "T"}
        if bad:
            raise InputError(f"unknown modality tags {sorted(bad)}")
        arr = arr == "V"
    arr = np.ascontiguousarray(arr, dtype=bool).reshape(-1)
    if n is not None and arr.shape[0] != n:
        raise InputError(f"mask length {arr.shape[0]} does not match {n} rows")
    return arr


def plan_blocks(mask, block_size=DEFAULT_BLOCK_SIZE):
    mask = as_mask(mask)
    if block_size < 1:
        raise InputError("block_size must be >= 1")
    n = mask.shape[0]
    starts = np.arange(0, n, block_size, dtype=np.int64)
    ends = np.minimum(starts + block_size, n)
    if n:
        vis_per_block = np.add.reduceat(mask.astype(np.int64), starts)
    else:
        vis_per_block = np.zeros(0, dtype=np.int64)
    has_v = vis_per_block > 0
    has_t = vis_per_block < (ends - starts)
    idx = np.arange(n, dtype=np.int64)
    key = (idx // block_size) * 2 + (~mask)
    row_order = np.argsort(key, kind="stable").astype(np.int64)
    return DispatchPlan(block_size, n, starts, ends, has_v, has_t, row_order=row_order,
                        split=starts + vis_per_block)


@dataclass
class ExpertOpSpec:
    """Weights of one expert pair.

    LINEAR: ``(w,)`` with ``w`` of shape [d_in, d_out].
    MLP: ``(gate, up, down)`` with shapes [d, h], [d, h], [h, d].
    """

    kind: OpKind
    visual: tuple
    textual: tuple

    def __post_init__(self):
        self.kind = OpKind(self.kind)
        self.visual = tuple(np.ascontiguousarray(w) for w in self.visual)
        self.textual = tuple(np.ascontiguousarray(w) for w in self.textual)
        want = 1 if self.kind is OpKind.LINEAR else 3
        if len(self.visual) != want or len(self.textual) != want:
            raise DimensionError(f"{self.kind.value} expert needs {want} weight(s)")
        for wv, wt in zip(self.visual, self.textual):
            if wv.shape != wt.shape:
                raise DimensionError(f"expert shapes differ: {wv.shape} vs {wt.shape}")
            if wv.dtype != wt.dtype:
                raise DimensionError("experts must share a dtype")
        if self.kind is OpKind.MLP:
            g, u, d = self.visual
            if g.shape != u.shape or d.shape != (g.shape[1], g.shape[0]):
                raise DimensionError(f"bad MLP shapes {g.shape}, {u.shape}, {d.shape}")

    @property
    def dtype(self):
        return self.visual[0].dtype

    @property
    def d_in(self):
        return self.visual[0].shape[0]

    @property
    def d_out(self):
        return self.visual[-1].shape[1]

    @property
    def flops_per_row(self):
        return 2 * sum(w.size for w in self.visual)

    def describe(self):
        if self.kind is OpKind.LINEAR:
            return f"Linear MoE ({self.d_in}->{self.d_out})"
        return f"MLP MoE ({self.d_in}->{self.visual[0].shape[1]}->{self.d_out})"

    @classmethod
    def linear(cls, w_visual, w_textual):
        return cls(OpKind.LINEAR, (w_visual,), (w_textual,))

    @classmethod
    def mlp(cls, visual, textual):
        return cls(OpKind.MLP, tuple(visual), tuple(textual))

    @classmethod
    def random(cls, kind, d_in, d_hidden_or_out, dtype=np.float32, seed=0):
        rng = np.random.default_rng(seed)

        def w(shape):
            return (rng.standard_normal(shape) / math.sqrt(shape[0])).astype(dtype)

        if OpKind(kind) is OpKind.LINEAR:
            return cls.linear(w((d_in, d_hidden_or_out)), w((d_in, d_hidden_or_out)))
        h = d_hidden_or_out
        return cls.mlp((w((d_in, h)), w((d_in, h)), w((h, d_in))),
                       (w((d_in, h)), w((d_in, h)), w((h, d_in))))


# paper-scale operator shapes
LINEAR_MOE_DIMS = (2048, 4096)
MLP_MOE_DIMS = (2048, 8192)


def _prep(x, mask, spec):
    x = np.ascontiguousarray(x)
    if x.ndim != 2 or x.shape[1] != spec.d_in:
        raise DimensionError(f"x has shape {x.shape}, expert expects width {spec.d_in}")
    if x.dtype != spec.dtype:
        x = x.astype(spec.dtype)
    return x, as_mask(mask, x.shape[0])


def _dense(x, weights, kind):
    out = np.empty((x.shape[0], weights[-1].shape[1]), dtype=x.dtype)
    if x.shape[0] == 0:
        return out
    if kind is OpKind.LINEAR:
        _kernels.mm_dense(x, weights[0], out)
    else:
        _kernels.mlp_dense(x, weights[0], weights[1], weights[2], out)
    return out


def dispatch_naive(x, mask, spec):
    """Both experts over all rows, then select per row."""
    x, mask = _prep(x, mask, spec)
    yv = _dense(x, spec.visual, spec.kind)
    yt = _dense(x, spec.textual, spec.kind)
    return np.where(mask[:, None], yv, yt)


def dispatch_reference(x, mask, spec):
    """Separate the modalities, run each expert densely, put rows back."""
    x, mask = _prep(x, mask, spec)
    out = np.empty((x.shape[0], spec.d_out), dtype=x.dtype)
    for rows, weights in ((np.flatnonzero(mask), spec.visual),
                          (np.flatnonzero(~mask), spec.textual)):
        if rows.size:
            out[rows] = _dense(x[rows], weights, spec.kind)
    return out


@dataclass
class FusedStats:
    n_blocks: int
    worked: np.ndarray = field(repr=False)

    @property
    def active_visual(self):
        return int(self.worked[0::2].sum())

    @property
    def active_textual(self):
        return int(self.worked[1::2].sum())

    @property
    def active(self):
        return int(self.worked.sum())

    @property
    def early_exits(self):
        return 2 * self.n_blocks - self.active


def dispatch_fused(x, mask, spec, plan=None, block_size=DEFAULT_BLOCK_SIZE, return_stats=False):
    x, mask = _prep(x, mask, spec)
    if plan is None:
        plan = plan_blocks(mask, block_size)
    elif plan.n_tokens != x.shape[0]:
        raise InputError(f"plan covers {plan.n_tokens} tokens but x has {x.shape[0]} rows")
    out = np.empty((x.shape[0], spec.d_out), dtype=x.dtype)
    worked = np.zeros(2 * plan.n_blocks, dtype=np.int8)
    if plan.n_blocks:
        if plan.row_order is None:
            plan = plan_blocks(mask, plan.block_size)
        args = (x, plan.row_order, plan.starts, plan.split, plan.ends, plan.has_visual,
                plan.has_textual)
        if spec.kind is OpKind.LINEAR:
            _kernels.fused_linear(*args, spec.visual[0], spec.textual[0], out, worked)
        else:
            _kernels.fused_mlp(*args, *spec.visual, *spec.textual, out, worked)
    if return_stats:
        return out, FusedStats(plan.n_blocks, worked)
    return out


def dispatch(x, mask, spec, strategy=Strategy.FUSED_BLOCKED, block_size=DEFAULT_BLOCK_SIZE,
             plan=None):
    strategy = Strategy(strategy)
    if strategy is Strategy.NAIVE:
        return dispatch_naive(x, mask, spec)
    if strategy is Strategy.GATHER_SCATTER:
        return dispatch_reference(x, mask, spec)
    return dispatch_fused(x, mask, spec, plan=plan, block_size=block_size)


# -- benchmark harness ------------------------------------------------------------

BENCH_COLUMNS = ["strategy", "kind", "seq_len", "layout", "median_us", "p10", "p90",
                 "speedup_vs_reference"]
PAPER_SEQ_LENS = (2048, 4096, 16384, 32768, 65536, 131072)


def make_layout(name, n, visual_fraction=0.75, seed=0):
    """Modality mask for a benchmark layout.

    ``contiguous``: an image run followed by text.  ``interleaved``: V,T,V,T...
    ``random``: i.i.d. tags with the given visual fraction.
    """
    if name == "contiguous":
        mask = np.zeros(n, dtype=bool)
        mask[: int(round(n * visual_fraction))] = True
        return mask
    if name == "interleaved":
        return (np.arange(n) % 2) == 0
    if name == "random":
        return np.random.default_rng(seed).random(n) < visual_fraction
    raise InputError(f"unknown layout {name!r}")


def _available_bytes():
    try:
        import psutil

        return psutil.virtual_memory().available
    except ImportError:  # pragma: no cover
        return None


def _bytes_needed(spec, n, strategy):
    item = np.dtype(spec.dtype).itemsize
    rows = n * (spec.d_in + spec.d_out) * item
    if strategy is Strategy.NAIVE:
        rows += 2 * n * spec.d_out * item
    elif strategy is Strategy.GATHER_SCATTER:
        rows += n * (spec.d_in + spec.d_out) * item
    return rows


def _time_once(fn, inner):
    t0 = time.perf_counter()
    for _ in range(inner):
        fn()
    return (time.perf_counter() - t0) / inner


def time_op(fn, repeats=10, warmup=3):
    """Median/p10/p90 wall time of ``fn`` in seconds.

    If one call is shorter than 100x the clock resolution, each sample loops
    the call enough times to bring the resolution under 1% of the sample.
    """
    if warmup < 3 or repeats < 10:
        raise InputError("bench needs warmup >= 3 and repeats >= 10")
    for _ in range(warmup):
        fn()
    resolution = time.get_clock_info("perf_counter").resolution
    probe = _time_once(fn, 1)
    inner = 1
    if probe < 100 * resolution:
        inner = int(math.ceil(100 * resolution / max(probe, 1e-12)))
        warnings.warn(f"timer resolution {resolution:.2e}s is coarse for a "
                      f"{probe:.2e}s op; looping {inner}x per sample", RuntimeWarning)
    samples = np.array([_time_once(fn, inner) for _ in range(repeats)])
    return float(np.median(samples)), float(np.percentile(samples, 10)), \
        float(np.percentile(samples, 90))


def time_interleaved(fns, repeats=10, warmup=3):
    """Time several callables with their calls interleaved.

    Each sample runs every callable once, alternating the order between
    samples, so machine drift lands on all of them alike.  Garbage collection
    is paused while sampling.  Returns ``{key: (median, p10, p90)}`` in seconds.
    """
    if warmup < 3 or repeats < 10:
        raise InputError("bench needs warmup >= 3 and repeats >= 10")
    keys = list(fns)
    for _ in range(warmup):
        for k in keys:
            fns[k]()
    resolution = time.get_clock_info("perf_counter").resolution
    inner = {}
    for k in keys:
        probe = _time_once(fns[k], 1)
        inner[k] = 1
        if probe < 100 * resolution:
            inner[k] = int(math.ceil(100 * resolution / max(probe, 1e-12)))
            warnings.warn(f"timer resolution {resolution:.2e}s is coarse for a "
                          f"{probe:.2e}s op; looping {inner[k]}x per sample", RuntimeWarning)
    samples = {k: [] for k in keys}
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(repeats):
            for k in (keys if i % 2 == 0 else keys[::-1]):
                samples[k].append(_time_once(fns[k], inner[k]))
    finally:
        if was_enabled:
            gc.enable()
    return {k: (float(np.median(v)), float(np.percentile(v, 10)), float(np.percentile(v, 90)))
            for k, v in samples.items()}


def bench_dispatch(spec, seq_lens, layouts=("contiguous", "interleaved"),
                   strategies=tuple(Strategy), repeats=10, warmup=3,
                   block_size=DEFAULT_BLOCK_SIZE, visual_fraction=0.75, seed=0,
                   memory_limit=None):
    """Latency rows ``{strategy, kind, seq_len, layout, median_us, p10, p90, speedup}``.

    Rows whose buffers would not fit in ``memory_limit`` (default: available
    RAM) are reported with NaN timings and logged as skipped.
    """
    strategies = [Strategy(s) for s in strategies]
    limit = memory_limit if memory_limit is not None else _available_bytes()
    rng = np.random.default_rng(seed)
    rows = []
    for n in seq_lens:
        for layout in layouts:
            mask = make_layout(layout, n, visual_fraction, seed)
            need = max(_bytes_needed(spec, n, s) for s in strategies)
            if limit is not None and need > 0.8 * limit:
                logger.warning("skipping seq_len=%d (%s): needs ~%.1f GB", n, layout, need / 1e9)
                for s in strategies:
                    rows.append(_row(s, spec, n, layout, (math.nan,) * 3, math.nan))
                continue
            x = rng.standard_normal((n, spec.d_in)).astype(spec.dtype)
            plan = plan_blocks(mask, block_size)
            fns = {
                Strategy.NAIVE: lambda: dispatch_naive(x, mask, spec),
                Strategy.GATHER_SCATTER: lambda: dispatch_reference(x, mask, spec),
                Strategy.FUSED_BLOCKED: lambda: dispatch_fused(x, mask, spec, plan=plan),
            }
            timed = list(dict.fromkeys(list(strategies) + [Strategy.GATHER_SCATTER]))
            timings = time_interleaved({s: fns[s] for s in timed}, repeats, warmup)
            ref = timings[Strategy.GATHER_SCATTER]
            for s in strategies:
                rows.append(_row(s, spec, n, layout, timings[s], ref[0] / timings[s][0]))
            del x
    return rows


def _row(strategy, spec, n, layout, timing, speedup):
    med, p10, p90 = timing
    return {"strategy": strategy.value, "kind": spec.kind.value, "seq_len": n,
            "layout": layout, "median_us": med * 1e6, "p10": p10 * 1e6, "p90": p90 * 1e6,
            "speedup_vs_reference": speedup}


def write_bench_csv(rows, path_or_file):
    close = False
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        f = open(path_or_file, "w", newline="")
        close = True
    else:
        f = path_or_file
    try:
        w = csv.DictWriter(f, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.3f}" if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if close:
            f.close()


def format_latency_table(rows, layout="contiguous"):
    """Text table in the op-latency layout: one block per kind, seq lens as columns."""
    lines = []
    kinds = sorted({r["kind"] for r in rows})
    for kind in kinds:
        sel = [r for r in rows if r["kind"] == kind and r["layout"] == layout]
        lens = sorted({r["seq_len"] for r in sel})
        head = "Method".ljust(16) + "".join(_fmt_len(n).rjust(12) for n in lens)
        lines += [f"[{kind} MoE, {layout}] latency in us", head]
        for strat in [s.value for s in Strategy]:
            cells = {r["seq_len"]: r for r in sel if r["strategy"] == strat}
            if not cells:
                continue
            lines.append(strat.ljust(16) + "".join(
                f"{cells[n]['median_us']:12,.0f}" if n in cells else " " * 12 for n in lens))
        fused = {r["seq_len"]: r for r in sel if r["strategy"] == Strategy.FUSED_BLOCKED.value}
        if fused:
            lines.append("Speedup".ljust(16) + "".join(
                f"{fused[n]['speedup_vs_reference']:11.2f}x" if n in fused else " " * 12
                for n in lens))
        lines.append("")
    return "\n".join(lines)


def _fmt_len(n):
    return f"{n // 1024}K" if n % 1024 == 0 else str(n)
