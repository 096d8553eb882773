"""Benchmark suites.

Operator suite: routed Linear / MLP experts over long sequences, one row per
(strategy, kind, seq_len, layout); see ``dispatch.bench_dispatch``.

Model suite: time-to-first-token (a full prefill, as there is no key/value
cache) and greedy decode throughput of a small f32 model for image/text token
mixes of 768/256, 1792/256 and 3840/256.
"""

from __future__ import annotations

import csv
import logging
import os
import time

import numpy as np

from . import multimodal as mm
from . import numerics as nx
from .dispatch import (LINEAR_MOE_DIMS, MLP_MOE_DIMS, PAPER_SEQ_LENS, ExpertOpSpec, OpKind,
                       Strategy, bench_dispatch, time_interleaved)
from .model import ModelConfig, ModelState, forward

logger = logging.getLogger(__name__)

MODEL_MIXES = ((768, 256), (1792, 256), (3840, 256))
# image-token grids for each mix (rows x cols, no thumbnail)
MIX_GRIDS = {768: (24, 32), 1792: (32, 56), 3840: (48, 80)}
MODEL_COLUMNS = ["strategy", "image_tokens", "text_tokens", "total_tokens", "ttft_median_ms",
                 "ttft_p10_ms", "ttft_p90_ms", "decode_tokens", "tps"]


def operator_specs(dtype="float32", seed=0, kinds=("linear", "mlp"), linear_dims=LINEAR_MOE_DIMS,
                   mlp_dims=MLP_MOE_DIMS):
    specs = []
    for kind in kinds:
        dims = linear_dims if OpKind(kind) is OpKind.LINEAR else mlp_dims
        specs.append(ExpertOpSpec.random(OpKind(kind), dims[0], dims[1], dtype, seed))
    return specs


def run_operator_suite(seq_lens=PAPER_SEQ_LENS, layouts=("contiguous", "interleaved"),
                       strategies=tuple(Strategy), kinds=("linear", "mlp"), repeats=10,
                       warmup=3, block_size=128, dtype="float32", seed=0, memory_limit=None,
                       linear_dims=LINEAR_MOE_DIMS, mlp_dims=MLP_MOE_DIMS):
    rows = []
    for spec in operator_specs(dtype, seed, kinds, tuple(linear_dims), tuple(mlp_dims)):
        rows += bench_dispatch(spec, seq_lens, layouts, strategies, repeats, warmup, block_size,
                               seed=seed, memory_limit=memory_limit)
    return rows


def bench_model_config(**overrides):
    rows, cols = MIX_GRIDS[max(MIX_GRIDS)]
    kw = dict(d_model=64, n_heads=4, n_layers=2, ffn_hidden=128, dtype="float32",
              max_context=rows * cols + 512, pe_grid=(rows, cols))
    kw.update(overrides)
    return ModelConfig(**kw)


def mix_inputs(n_image, n_text, seed=0):
    """(pixels, rows, cols, text ids) giving exactly ``n_image`` visual tokens."""
    rows, cols = MIX_GRIDS.get(n_image, (1, n_image))
    rng = np.random.default_rng([seed, n_image])
    pixels = rng.random((rows * mm.PATCH, cols * mm.PATCH, 3))
    # text = prompt + response; the three layout specials bring it to n_text
    ids = list(rng.integers(32, 127, size=n_text - 3))
    return pixels, rows, cols, ids


def _prefill(model, patches, grid, ids):
    emb = model.embed_patches(patches, grid)
    seq = mm.assemble(emb, ids, (len(ids), len(ids)), model.embed_text, add_eos=False)
    logits = forward(seq, model, last_only=True)
    return int(np.argmax(logits.data[-1]))


def _decode(model, patches, grid, ids, n_tokens):
    emb = model.embed_patches(patches, grid)
    ids = list(ids)
    for _ in range(n_tokens):
        seq = mm.assemble(emb, ids, (len(ids), len(ids)), model.embed_text, add_eos=False)
        ids.append(int(np.argmax(forward(seq, model, last_only=True).data[-1])) % 256)
    return ids


def run_model_suite(mixes=MODEL_MIXES, strategies=(Strategy.GATHER_SCATTER,
                                                   Strategy.FUSED_BLOCKED),
                    repeats=30, warmup=3, decode_tokens=4, seed=0, config=None):
    """Prefill and decode timings per (mix, strategy).

    Prefill calls of the strategies are interleaved (see ``time_interleaved``).
    """
    config = config or bench_model_config()
    model = ModelState(config, seed=seed)
    strategies = [Strategy(s) for s in strategies]
    rows = []

    def prefill_with(s, patches, grid, ids):
        def run():
            model.strategy = s
            return _prefill(model, patches, grid, ids)
        return run

    with nx.no_grad():
        for n_image, n_text in mixes:
            pixels, _, _, ids = mix_inputs(n_image, n_text, seed)
            patches, grid = mm.patchify(pixels, n_image, thumbnail=False)
            timings = time_interleaved({s: prefill_with(s, patches, grid, ids)
                                        for s in strategies}, repeats, warmup)
            for s in strategies:
                med, p10, p90 = timings[s]
                model.strategy = s
                t0 = time.perf_counter()
                if decode_tokens:
                    _decode(model, patches, grid, ids, decode_tokens)
                dt = time.perf_counter() - t0
                rows.append({"strategy": s.value, "image_tokens": n_image,
                             "text_tokens": n_text, "total_tokens": n_image + n_text,
                             "ttft_median_ms": med * 1e3, "ttft_p10_ms": p10 * 1e3,
                             "ttft_p90_ms": p90 * 1e3, "decode_tokens": decode_tokens,
                             "tps": decode_tokens / dt if decode_tokens else float("nan")})
    return rows


def write_model_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=MODEL_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})


def format_model_table(rows):
    lines = ["#Image/#Text".ljust(14) + "strategy".ljust(16) + "TTFT ms".rjust(10)
             + "TPS".rjust(10)]
    for r in rows:
        lines.append(f"{r['image_tokens']}/{r['text_tokens']}".ljust(14) + r["strategy"].ljust(16)
                     + f"{r['ttft_median_ms']:10.2f}" + f"{r['tps']:10.2f}")
    return "\n".join(lines)


def machine_info():
    return {"cpu_count": os.cpu_count(), "numba_threads": nx.get_num_threads()}
