"""Run configuration files.

Plain text, one ``key = value`` per line, grouped in sections::

    # comments start with '#'
    [run]
    seed = 0
    variant = EVIP_PP

    [model]
    d_model = 64

    [stage S1.1]
    steps = 250
    lr = 5e-4

    [bench]
    seq_lens = 2048, 4096

Every key must be known for its section; anything else is an error that names
the offending line.  Lists are comma separated.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

from .exceptions import ConfigError
from .model import ModelConfig

ENV_OUT = "MONOVL_OUT_DIR"


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv):
    return lambda s: [conv(x.strip()) for x in s.split(",") if x.strip()]


def _opt_float(s):
    return None if s.strip().lower() in ("none", "") else float(s)


def _mix(s):
    a, b = s.split(":")
    return (int(a), int(b))


RUN_KEYS = {
    "seed": int, "threads": int, "out": str, "variant": str, "curriculum": str,
    "dataset": str, "heldout_dataset": str, "train_samples": int, "heldout_samples": int,
    "pretrain_steps": int, "pretrain_lr": float, "eval_samples": int, "max_new_tokens": int,
    "strategy": str, "block_size": int,
}
MODEL_KEYS = {
    "d_model": int, "n_heads": int, "n_layers": int, "ffn_hidden": int, "vocab_size": int,
    "max_context": int, "pe_grid": _list(int), "patch_dim": int, "attention_experts": _bool,
    "route_o_proj": _bool, "norm_experts": _bool, "rms_eps": float,
    "projector_activation": str, "init_std": float, "dtype": str,
}
STAGE_KEYS = {
    "steps": int, "lr": float, "batch_size": int, "patch_budget": int, "data_source": str,
    "trainable_groups": _list(str), "warmup_frac": float, "weight_decay": float,
    "betas": _list(float), "eps": float, "clip_norm": _opt_float,
}
BENCH_KEYS = {
    "seq_lens": _list(int), "layouts": _list(str), "strategies": _list(str),
    "kinds": _list(str), "repeats": int, "warmup": int, "dtype": str, "block_size": int,
    "model_mixes": _list(_mix), "model_repeats": int, "decode_tokens": int,
    "operator_suite": _bool, "model_suite": _bool, "linear_dims": _list(int),
    "mlp_dims": _list(int),
}
STAGE_NAMES = ("S1.1", "S1.2", "S1.3", "S2")


@dataclass
class RunConfig:
    seed: int = 0
    threads: int | None = None
    out: str = "runs/default"
    variant: str = "EVIP_PP"
    curriculum: str | None = None
    dataset: str | None = None
    heldout_dataset: str | None = None
    train_samples: int = 2000
    heldout_samples: int = 200
    pretrain_steps: int = 400
    pretrain_lr: float = 1e-3
    eval_samples: int = 200
    max_new_tokens: int = 96
    strategy: str = "fused"
    block_size: int = 128
    model: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)
    source: str | None = None

    def model_config(self, **overrides):
        """Attention experts follow the variant unless [model] sets them."""
        d = {"attention_experts": self.variant == "EVIP_PP"}
        d.update(self.model)
        d.update(overrides)
        return ModelConfig.from_dict(d)

    def output_dir(self, cli_out=None):
        """--out beats the environment variable, which beats the file."""
        if cli_out:
            return cli_out
        return os.environ.get(ENV_OUT) or self.out


def _convert(table, key, raw, where):
    try:
        return table[key](raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None


def parse_sections(text, source="<config>"):
    """[(section, {key: (value, lineno)}, lineno)] in file order."""
    sections = []
    current = None
    errors = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if s.startswith("["):
            if not s.endswith("]"):
                errors.append(f"{source}:{lineno}: malformed section header {line.strip()!r}")
                continue
            current = (" ".join(s[1:-1].split()), {}, lineno)
            sections.append(current)
            continue
        if "=" not in s:
            errors.append(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
            continue
        if current is None:
            errors.append(f"{source}:{lineno}: key outside any section")
            continue
        key, value = (x.strip() for x in s.split("=", 1))
        if key in current[1]:
            errors.append(f"{source}:{lineno}: duplicate key {key!r} "
                          f"(first on line {current[1][key][1]})")
            continue
        current[1][key] = (value, lineno)
    if errors:
        raise ConfigError("\n".join(errors))
    return sections


def parse_config(text, source="<config>", base_dir=None):
    cfg = RunConfig(source=source)
    errors = []
    seen = set()
    for name, entries, lineno in parse_sections(text, source):
        if name in seen:
            errors.append(f"{source}:{lineno}: duplicate section [{name}]")
            continue
        seen.add(name)
        parts = name.split()
        if name == "run":
            table, target = RUN_KEYS, None
        elif name == "model":
            table, target = MODEL_KEYS, cfg.model
        elif name == "bench":
            table, target = BENCH_KEYS, cfg.bench
        elif len(parts) == 2 and parts[0] == "stage":
            if parts[1] not in STAGE_NAMES:
                errors.append(f"{source}:{lineno}: unknown stage {parts[1]!r}; "
                              f"expected one of {', '.join(STAGE_NAMES)}")
                continue
            table, target = STAGE_KEYS, cfg.stages.setdefault(parts[1], {})
        else:
            errors.append(f"{source}:{lineno}: unknown section [{name}]")
            continue
        for key, (raw, ln) in entries.items():
            where = f"{source}:{ln}"
            if key not in table:
                errors.append(f"{where}: unknown key {key!r} in [{name}]")
                continue
            try:
                value = _convert(table, key, raw, where)
            except ConfigError as exc:
                errors.append(str(exc))
                continue
            if target is None:
                setattr(cfg, key, value)
            else:
                target[key] = value
    if errors:
        raise ConfigError("\n".join(errors))
    if cfg.variant not in ("EVIP", "EVIP_PP"):
        raise ConfigError(f"{source}: variant must be EVIP or EVIP_PP, not {cfg.variant!r}")
    if cfg.strategy not in ("naive", "gather_scatter", "fused"):
        raise ConfigError(f"{source}: strategy must be naive, gather_scatter or fused, "
                          f"not {cfg.strategy!r}")
    if cfg.curriculum:
        path = cfg.curriculum
        if base_dir and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        with open(path) as f:
            extra = parse_config(f.read(), path)
        for stage, values in extra.stages.items():
            cfg.stages.setdefault(stage, {}).update(values)
    try:
        cfg.model_config()
    except (ConfigError, TypeError) as exc:
        raise ConfigError(f"{source}: invalid [model] section: {exc}") from None
    return cfg


def load_config(path):
    with open(path) as f:
        text = f.read()
    return parse_config(text, path, os.path.dirname(os.path.abspath(path)))


def render_config(cfg):
    """Text form accepted by ``parse_config``."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (list, tuple)):
            return ", ".join(f"{x[0]}:{x[1]}" if isinstance(x, tuple) else str(x) for x in v)
        return str(v)

    lines = ["[run]"]
    for f in dataclasses.fields(RunConfig):
        if f.name in RUN_KEYS:
            v = getattr(cfg, f.name)
            if v is not None:
                lines.append(f"{f.name} = {fmt(v)}")
    if cfg.model:
        lines += ["", "[model]"] + [f"{k} = {fmt(v)}" for k, v in cfg.model.items()]
    for stage, values in cfg.stages.items():
        lines += ["", f"[stage {stage}]"] + [f"{k} = {fmt(v)}" for k, v in values.items()]
    if cfg.bench:
        lines += ["", "[bench]"] + [f"{k} = {fmt(v)}" for k, v in cfg.bench.items()]
    return "\n".join(lines) + "\n"
