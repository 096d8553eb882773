"""Command line: ``monovl {train,eval,bench,inspect,data}``.

Common flags: ``--config FILE``, ``--seed N``, ``--threads N``, ``--out DIR``.
The output directory is taken from ``--out``, else ``$MONOVL_OUT_DIR``, else the
config file's ``[run] out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

log = logging.getLogger("monovl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _common(p):
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--threads", type=int, help="worker threads for the compiled kernels")
    p.add_argument("--out", help="output directory (beats $MONOVL_OUT_DIR)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="monovl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="text warm-up then the staged curriculum")
    _common(p)
    p.add_argument("--resume", help="continue after the stage stored in this checkpoint")

    p = sub.add_parser("eval", help="greedy captioning on held-out samples")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--samples", type=int, help="number of held-out samples")

    p = sub.add_parser("bench", help="operator and model latency suites")
    _common(p)
    p.add_argument("--suite", choices=("all", "operator", "model"), default="all")

    p = sub.add_parser("inspect", help="print a checkpoint's config and verify its blobs")
    _common(p)
    p.add_argument("checkpoint")

    p = sub.add_parser("data", help="write synthetic samples as checksummed shards")
    _common(p)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--start", type=int, default=0, help="index of the first sample")
    p.add_argument("--shard-size", type=int, default=256)
    return parser


def _load_run_config(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg


def _apply_threads(cfg):
    if cfg.threads:
        from . import numerics as nx

        nx.set_num_threads(cfg.threads)


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# -- datasets ---------------------------------------------------------------------------------

HELDOUT_SEED_OFFSET = 1000
HELDOUT_START = 1_000_000


def training_datasets(cfg):
    from . import synthetic as syn

    if cfg.dataset:
        return {t: syn.read_shards(cfg.dataset, t) for t in syn.TASKS}
    return {t: syn.SyntheticDataset(cfg.seed, cfg.train_samples, t) for t in syn.TASKS}


def heldout_dataset(cfg, task="concept", n=None):
    from . import synthetic as syn

    n = n or cfg.heldout_samples
    if cfg.heldout_dataset:
        ds = syn.read_shards(cfg.heldout_dataset, task)
        return syn.ListDataset(list(ds)[:n])
    return syn.SyntheticDataset(cfg.seed + HELDOUT_SEED_OFFSET, n, task, start=HELDOUT_START)


def build_plans(cfg, model_config):
    from .trainer import StagePlan, curriculum

    plans = curriculum(cfg.variant, model_config)
    out = []
    for plan in plans:
        over = cfg.stages.get(plan.name, {})
        if over:
            d = dict(plan.to_dict(), **over)
            plan = StagePlan(**d)
        out.append(plan)
    return out


# -- commands ---------------------------------------------------------------------------------

def cmd_train(args):
    import numpy as np

    from . import model as M
    from . import trainer as T
    from .checkpoint import load_checkpoint, save_checkpoint

    cfg = _load_run_config(args)
    _apply_threads(cfg)
    out = cfg.output_dir(args.out)
    datasets = training_datasets(cfg)
    if args.resume:
        model, meta = load_checkpoint(args.resume)
        if cfg.model and model.config.to_dict() != cfg.model_config().to_dict():
            return _config_mismatch(cfg.model_config().to_dict(), model.config.to_dict())
        model.strategy = M.Strategy(cfg.strategy)
        model.block_size = cfg.block_size
        rng = np.random.default_rng()
        rng.bit_generator.state = meta.rng_state
        start = meta.stage_index + 1
    else:
        model = M.ModelState(cfg.model_config(), seed=cfg.seed, strategy=cfg.strategy,
                             block_size=cfg.block_size)
        start = 0
    plans = build_plans(cfg, model.config)
    os.makedirs(out, exist_ok=True)
    reports = []
    if not args.resume:
        log.info("text warm-up: %d steps", cfg.pretrain_steps)
        s0 = T.pretrain_text(model, datasets["concept"], steps=cfg.pretrain_steps, seed=cfg.seed,
                             lr=cfg.pretrain_lr, log=log.info, variant=cfg.variant)
        reports.append(s0)
        M.init_visual_from_textual(model)
        rng = np.random.default_rng(cfg.seed)
        save_checkpoint(os.path.join(out, "stage-S0.ckpt"), model, "S0", -1, cfg.variant,
                        rng.bit_generator.state)
    reports += T.run_curriculum(model, plans, datasets, out, rng=rng, start_index=start,
                                log=log.info)
    T.write_loss_csv(reports, os.path.join(out, "loss.csv"))
    audit = [r.summary() for r in reports]
    _write_json(os.path.join(out, "freeze_audit.json"), audit)
    ok = all(r.frozen_unchanged for r in reports)
    summary = {"variant": cfg.variant, "seed": cfg.seed, "stages": [r.stage for r in reports],
               "final_loss": reports[-1].losses[-1] if reports and reports[-1].losses else None,
               "freeze_audit_ok": ok,
               "checkpoints": [r.checkpoint for r in reports if r.checkpoint]}
    _write_json(os.path.join(out, "train_summary.json"), summary)
    print(json.dumps(summary, indent=2))
    return EXIT_OK if ok else EXIT_FAIL


def _config_mismatch(expected, found):
    print("config/checkpoint mismatch; refusing to continue", file=sys.stderr)
    print("config file model:  " + json.dumps(expected, sort_keys=True), file=sys.stderr)
    print("checkpoint model:   " + json.dumps(found, sort_keys=True), file=sys.stderr)
    return EXIT_USAGE


def cmd_eval(args):
    from . import trainer as T
    from .checkpoint import load_checkpoint

    cfg = _load_run_config(args)
    _apply_threads(cfg)
    model, meta = load_checkpoint(args.checkpoint)
    if cfg.model:
        expected = cfg.model_config().to_dict()
        if expected != model.config.to_dict():
            return _config_mismatch(expected, model.config.to_dict())
    n = args.samples or cfg.eval_samples
    held = heldout_dataset(cfg, "concept", n)
    metrics = T.evaluate_captions(model, held, max_new_tokens=cfg.max_new_tokens)
    metrics.update({"checkpoint": args.checkpoint, "stage_tag": meta.stage_tag})
    if args.out or os.environ.get("MONOVL_OUT_DIR"):
        out = cfg.output_dir(args.out)
        os.makedirs(out, exist_ok=True)
        _write_json(os.path.join(out, "eval.json"), metrics)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_bench(args):
    from . import bench as B
    from .dispatch import (LINEAR_MOE_DIMS, MLP_MOE_DIMS, PAPER_SEQ_LENS, format_latency_table,
                           write_bench_csv)

    cfg = _load_run_config(args)
    _apply_threads(cfg)
    b = cfg.bench
    out = cfg.output_dir(args.out)
    os.makedirs(out, exist_ok=True)
    info = dict(B.machine_info(), seed=cfg.seed)
    result = {"machine": info}
    if args.suite in ("all", "operator") and b.get("operator_suite", True):
        rows = B.run_operator_suite(
            seq_lens=b.get("seq_lens", PAPER_SEQ_LENS),
            layouts=b.get("layouts", ("contiguous", "interleaved")),
            strategies=b.get("strategies", ("naive", "gather_scatter", "fused")),
            kinds=b.get("kinds", ("linear", "mlp")), repeats=b.get("repeats", 10),
            warmup=b.get("warmup", 3), block_size=b.get("block_size", cfg.block_size),
            dtype=b.get("dtype", "float32"), seed=cfg.seed,
            linear_dims=b.get("linear_dims", LINEAR_MOE_DIMS),
            mlp_dims=b.get("mlp_dims", MLP_MOE_DIMS))
        path = os.path.join(out, "op_latency.csv")
        write_bench_csv(rows, path)
        print(format_latency_table(rows, "contiguous"))
        print(format_latency_table(rows, "interleaved"))
        result["operator_csv"] = path
    if args.suite in ("all", "model") and b.get("model_suite", True):
        rows = B.run_model_suite(mixes=b.get("model_mixes", B.MODEL_MIXES),
                                 repeats=b.get("model_repeats", 30), warmup=b.get("warmup", 3),
                                 decode_tokens=b.get("decode_tokens", 4), seed=cfg.seed)
        path = os.path.join(out, "model_latency.csv")
        B.write_model_csv(rows, path)
        print(B.format_model_table(rows))
        result["model_csv"] = path
    _write_json(os.path.join(out, "bench.json"), result)
    return EXIT_OK


def cmd_inspect(args):
    from .checkpoint import verify_checkpoint
    from .exceptions import ChecksumError
    from .model import ModelConfig, count_parameters, ModelState

    try:
        meta, results = verify_checkpoint(args.checkpoint)
    except ChecksumError as exc:
        print(f"CHECKSUM FAILED: {exc.blob}: {exc}")
        return EXIT_FAIL
    print(f"checkpoint: {args.checkpoint}")
    print(f"stage: {meta.stage_tag} (index {meta.stage_index}) variant: {meta.variant or '-'}")
    print("config: " + json.dumps(meta.config, sort_keys=True))
    counts = count_parameters(ModelState(ModelConfig.from_dict(meta.config)))
    for k, v in counts.items():
        print(f"  {k:22s} {v:.4f}" if isinstance(v, float) else f"  {k:22s} {v:,}")
    bad = [n for n, ok in results if not ok]
    for n in bad:
        print(f"CHECKSUM FAILED: {n}")
    if not bad:
        print(f"checksums: all {len(results)} blobs OK")
    return EXIT_FAIL if bad else EXIT_OK


def cmd_data(args):
    from . import synthetic as syn

    cfg = _load_run_config(args)
    out = cfg.output_dir(args.out)
    samples = syn.gen_synthetic(cfg.seed, args.samples, start=args.start)
    manifest = syn.write_shards(samples, out, args.shard_size)
    print(json.dumps(manifest, indent=2))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "inspect": cmd_inspect,
            "data": cmd_data}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.threads and "NUMBA_NUM_THREADS" not in os.environ:
        # the kernel thread pool is sized when numba is first imported
        os.environ["NUMBA_NUM_THREADS"] = str(max(args.threads, os.cpu_count() or 1))
    from .exceptions import ChecksumError, ConfigError, MonoVLError

    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_USAGE
    except ChecksumError as exc:
        print(f"CHECKSUM FAILED: {exc.blob}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (MonoVLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
