"""Staged delta tuning: freeze masks, next-token loss, AdamW and the curricula.

Stages train a growing subset of the model:

* S1.1 / S1.2 - patch embedding, visual PE, projector and the visual FFN experts
  (plus the visual Q/K/V experts in the ``EVIP_PP`` variant)
* S1.3       - additionally every attention parameter
* S2         - everything

``S0`` is a text-only warm-up of the language side that stands in for a
pretrained language model; it never touches visual parameters.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from fnmatch import fnmatch

import numpy as np

from . import multimodal as mm
from . import numerics as nx
from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import ConfigError, InputError, TrainingDiverged
from .model import ModelConfig, ModelState, forward, greedy_decode

STAGES = ("S1.1", "S1.2", "S1.3", "S2")
STAGE_DATA = {"S0": "concept", "S1.1": "concept", "S1.2": "semantic", "S1.3": "alignment",
              "S2": "instruction"}
DEFAULT_STEPS = {"S0": 400, "S1.1": 500, "S1.2": 300, "S1.3": 300, "S2": 200}


class Variant(str, enum.Enum):
    EVIP = "EVIP"
    EVIP_PP = "EVIP_PP"


VISUAL_CORE = ("patch_embed.*", "visual_pe", "projector.*", "layers.*.ffn.visual.*")


def stage_groups(name, variant, config=None):
    """Trainable name patterns for one stage."""
    variant = Variant(variant)
    norm_visual = ("layers.*_norm.visual.*",) if config is not None and config.norm_experts else ()
    if name == "S0":
        groups = ["tok_embed", "pos_embed", "final_norm.*", "head.*", "layers.*.ffn.textual.*"]
        if config is not None and config.norm_experts:
            groups.append("layers.*_norm.textual.*")
        else:
            groups.append("layers.*_norm.gain")
        if config is not None and config.attention_experts:
            groups.append("layers.*.attn.*.textual.*")
            if not config.route_o_proj:
                groups.append("layers.*.attn.o.weight")
        else:
            groups.append("layers.*.attn.*.weight")
        return tuple(groups)
    if name in ("S1.1", "S1.2"):
        groups = VISUAL_CORE + norm_visual
        if variant is Variant.EVIP_PP:
            groups += ("layers.*.attn.*.visual.*",)
        return groups
    if name == "S1.3":
        return stage_groups("S1.1", variant, config) + ("layers.*.attn.*",)
    if name == "S2":
        return ("*",)
    raise ConfigError(f"unknown stage {name!r}")


@dataclass
class StagePlan:
    name: str
    variant: Variant = Variant.EVIP
    trainable_groups: tuple = ()
    patch_budget: int = 1280
    lr: float = 5e-4
    steps: int = 100
    data_source: str = "concept"
    batch_size: int = 8
    warmup_frac: float = 0.03
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    with_images: bool = True

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.trainable_groups = tuple(self.trainable_groups)
        self.betas = tuple(self.betas)
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError(f"{self.name}: steps/batch_size/lr out of range")

    def lr_at(self, step):
        """Linear warmup over ``warmup_frac`` of the steps, then constant."""
        warm = int(math.ceil(self.warmup_frac * self.steps))
        if warm and step < warm:
            return self.lr * (step + 1) / warm
        return self.lr

    def to_dict(self):
        d = dict(self.__dict__)
        d["variant"] = self.variant.value
        d["trainable_groups"] = list(self.trainable_groups)
        d["betas"] = list(self.betas)
        return d


def make_plan(name, variant=Variant.EVIP, config=None, **overrides):
    kw = dict(name=name, variant=variant, trainable_groups=stage_groups(name, variant, config),
              patch_budget=mm.STAGE_BUDGETS.get(name, mm.STAGE_BUDGETS["S1.1"]),
              steps=DEFAULT_STEPS[name], data_source=STAGE_DATA[name],
              with_images=name != "S0")
    if name == "S0":
        kw["lr"] = 1e-3
    kw.update(overrides)
    return StagePlan(**kw)


def curriculum(variant=Variant.EVIP, config=None, steps=None, step_scale=None, **overrides):
    """The four stages in order.  ``EVIP_PP`` halves the S1.1/S1.2 step budgets
    unless ``step_scale`` says otherwise."""
    variant = Variant(variant)
    steps = dict(DEFAULT_STEPS, **(steps or {}))
    if step_scale is None:
        step_scale = {"S1.1": 0.5, "S1.2": 0.5} if variant is Variant.EVIP_PP else {}
    plans = []
    for name in STAGES:
        n = int(round(steps[name] * step_scale.get(name, 1.0)))
        plans.append(make_plan(name, variant, config, steps=n, **overrides))
    return plans


# -- freezing ---------------------------------------------------------------------------------

def apply_freeze(model, plan_or_groups):
    groups = getattr(plan_or_groups, "trainable_groups", plan_or_groups)
    names = model.names()
    for g in groups:
        if not any(fnmatch(n, g) for n in names):
            raise ConfigError(f"trainable group {g!r} matches no parameter")
    for n, p in model.params.items():
        p.trainable = any(fnmatch(n, g) for g in groups)
    return model


def trainable_names(model):
    return [n for n, p in model.params.items() if p.trainable]


def group_checksums(model):
    """sha256 over the trainable and over the frozen parameters."""
    out = {}
    for key, flag in (("trainable", True), ("frozen", False)):
        h = hashlib.sha256()
        for n, p in model.params.items():
            if p.trainable == flag:
                h.update(n.encode())
                h.update(np.ascontiguousarray(p.data).tobytes())
        out[key] = h.hexdigest()
    return out


def param_checksums(model):
    return {n: hashlib.sha256(np.ascontiguousarray(p.data).tobytes()).hexdigest()
            for n, p in model.params.items()}


# -- loss --------------------------------------------------------------------------------------

def next_token_targets(seq):
    """(targets, weights) aligned with the logits rows."""
    n = len(seq)
    ids = np.asarray(seq.token_ids)
    targets = np.zeros(n, dtype=np.int64)
    weights = np.zeros(n)
    targets[:-1] = np.maximum(ids[1:], 0)
    weights[:-1] = seq.loss_mask[1:]
    return targets, weights


def ar_loss(logits, seq):
    """Mean next-token cross-entropy over the loss-masked tokens."""
    if logits.shape[0] != len(seq):
        raise InputError(f"{logits.shape[0]} logit rows for a {len(seq)}-token sequence")
    if not np.any(seq.loss_mask[1:]):
        raise InputError("loss_mask selects no predictable token")
    targets, weights = next_token_targets(seq)
    return nx.weighted_nll(logits, targets, weights.astype(logits.dtype))


# -- optimizer ---------------------------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def optimizer_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One decoupled-weight-decay Adam step over the trainable parameters."""
    b1, b2 = betas
    for p, g in zip(params, grads):
        if not p.trainable:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {p.name}")
        key = p.name or id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
            state.t[key] = 0
        v = state.v[key]
        state.t[key] += 1
        t = state.t[key]
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
    return state


# -- training ----------------------------------------------------------------------------------

@dataclass
class TrainReport:
    stage: str
    variant: str
    stage_index: int = -1
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    checksums_before: dict = field(default_factory=dict)
    checksums_after: dict = field(default_factory=dict)
    frozen_params: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str | None = None

    @property
    def frozen_unchanged(self):
        return self.checksums_before.get("frozen") == self.checksums_after.get("frozen")

    def summary(self):
        return {"stage": self.stage, "variant": self.variant, "stage_index": self.stage_index,
                "steps": len(self.losses),
                "first_loss": self.losses[0] if self.losses else None,
                "last_loss": self.losses[-1] if self.losses else None,
                "frozen_params": len(self.frozen_params),
                "frozen_unchanged": self.frozen_unchanged,
                "checksums_before": self.checksums_before,
                "checksums_after": self.checksums_after,
                "wall_time_s": round(self.wall_time, 3), "checkpoint": self.checkpoint}


LOSS_CSV_COLUMNS = ["stage", "variant", "step", "lr", "loss"]


def write_loss_csv(reports, path_or_file):
    own = isinstance(path_or_file, (str, os.PathLike))
    f = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOSS_CSV_COLUMNS)
        for r in reports:
            for i, (lr, loss) in enumerate(zip(r.lrs, r.losses)):
                w.writerow([r.stage, r.variant, i, repr(float(lr)), repr(float(loss))])
    finally:
        if own:
            f.close()


def build_sequence(model, sample, plan_or_budget, with_images=True):
    budget = getattr(plan_or_budget, "patch_budget", plan_or_budget)
    image = sample.image if with_images else None
    return model.build_sequence(image, sample.prompt, sample.response, budget)


def _diagnostics(model, step, lr):
    norms = {n: float(np.linalg.norm(p.grad)) for n, p in model.params.items() if p.trainable}
    worst = sorted(norms.items(), key=lambda kv: -kv[1] if np.isfinite(kv[1]) else -np.inf)[:5]
    return f"step={step} lr={lr:g} largest grad norms={worst}"


def _clip(params, max_norm):
    total = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
    if max_norm is not None and total > max_norm:
        for p in params:
            p.grad *= max_norm / total
    return total


def train_stage(model, plan, dataset, optimizer=None, rng=None, stage_index=-1, log=None):
    """Run ``plan.steps`` optimizer steps; frozen parameters never change."""
    rng = rng if rng is not None else np.random.default_rng(0)
    optimizer = optimizer if optimizer is not None else AdamWState()
    report = TrainReport(plan.name, plan.variant.value, stage_index)
    report.frozen_params = [n for n, p in model.params.items() if not p.trainable]
    report.checksums_before = group_checksums(model)
    params = model.parameters()
    trainable = [p for p in params if p.trainable]
    t0 = time.perf_counter()
    for step in range(plan.steps):
        lr = plan.lr_at(step)
        idx = rng.integers(0, len(dataset), size=plan.batch_size)
        nx.zero_grads(params)
        total = 0.0
        for i in idx:
            seq = build_sequence(model, dataset[int(i)], plan, plan.with_images)
            try:
                loss = ar_loss(forward(seq, model), seq)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{plan.name}: {exc}; {_diagnostics(model, step, lr)}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"{plan.name}: loss {value}; {_diagnostics(model, step, lr)}")
            nx.scale(loss, 1.0 / plan.batch_size).backward()
            total += value
        gnorm = _clip(trainable, plan.clip_norm)
        if not math.isfinite(gnorm):
            raise TrainingDiverged(f"{plan.name}: gradient norm {gnorm}; "
                                   f"{_diagnostics(model, step, lr)}")
        optimizer_step(params, [p.grad for p in params], optimizer, lr, plan.betas, plan.eps,
                       plan.weight_decay)
        report.losses.append(total / plan.batch_size)
        report.lrs.append(lr)
        if log is not None and (step % 50 == 0 or step == plan.steps - 1):
            log(f"{plan.name} step {step}/{plan.steps} loss {report.losses[-1]:.4f}")
    nx.zero_grads(params)
    report.wall_time = time.perf_counter() - t0
    report.checksums_after = group_checksums(model)
    return report


def evaluate_loss(model, dataset, budget=mm.STAGE_BUDGETS["S2"], with_images=True, limit=None):
    """Mean per-sample next-token loss, no gradient tracking."""
    n = len(dataset) if limit is None else min(limit, len(dataset))
    losses = []
    with nx.no_grad():
        for i in range(n):
            seq = build_sequence(model, dataset[i], budget, with_images)
            losses.append(float(ar_loss(forward(seq, model), seq).data))
    return float(np.mean(losses))


def checkpoint_name(index, plan):
    return f"stage{index:02d}-{plan.name}.ckpt"


def run_curriculum(model, plans, datasets, out_dir=None, seed=0, rng=None, start_index=0,
                   log=None):
    """Train stages in order, checkpointing after each.

    ``datasets`` maps a plan's ``data_source`` to a dataset.  One generator
    drives sample selection for the whole run; its state is saved with every
    checkpoint so a resumed run replays bit for bit.  Each stage starts with a
    fresh optimizer state.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    reports = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for k, plan in enumerate(plans[start_index:], start=start_index):
        if plan.data_source not in datasets:
            raise ConfigError(f"{plan.name}: no dataset for source {plan.data_source!r}")
        apply_freeze(model, plan)
        report = train_stage(model, plan, datasets[plan.data_source], AdamWState(), rng, k, log)
        if out_dir is not None:
            path = os.path.join(out_dir, checkpoint_name(k, plan))
            save_checkpoint(path, model, plan.name, k, plan.variant.value,
                            rng.bit_generator.state, {"plans": [p.to_dict() for p in plans]})
            report.checkpoint = path
        reports.append(report)
    return reports


def resume_curriculum(checkpoint_path, plans, datasets, out_dir=None, log=None):
    """Continue a run after the stage stored in ``checkpoint_path``."""
    model, meta = load_checkpoint(checkpoint_path)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta.rng_state
    reports = run_curriculum(model, plans, datasets, out_dir, rng=rng,
                             start_index=meta.stage_index + 1, log=log)
    return model, reports


def reports_json(reports):
    return json.dumps([r.summary() for r in reports], indent=2)


def loss_csv_text(reports):
    buf = io.StringIO()
    write_loss_csv(reports, buf)
    return buf.getvalue()


# -- language-side warm-up and variant conversion ----------------------------------------------------

def pretrain_text(model, dataset, steps=DEFAULT_STEPS["S0"], seed=0, log=None,
                  variant=Variant.EVIP, **overrides):
    """Text-only warm-up of the language side (no image tokens).

    The warm-up is identical for both variants; ``variant`` only labels the report.
    """
    plan = make_plan("S0", Variant(variant), model.config, steps=steps, **overrides)
    apply_freeze(model, plan)
    return train_stage(model, plan, dataset, AdamWState(), np.random.default_rng([seed, 99]),
                       -1, log)


def with_attention_experts(model, **config_changes):
    """Copy of ``model`` whose Q/K/V projection is split into textual and visual
    experts, both starting from the shared weight."""
    cfg = ModelConfig.from_dict(dict(model.config.to_dict(), attention_experts=True,
                                     **config_changes))
    out = ModelState(cfg, strategy=model.strategy, block_size=model.block_size)
    arrays = {}
    for n in out.params:
        src = n
        if n not in model.params:
            for side in (".textual.", ".visual."):
                if side in n:
                    src = n.replace(side, ".")
        arrays[n] = model.params[src].data
    out.load_arrays(arrays)
    return out


def evaluate_captions(model, dataset, max_new_tokens=96, budget=mm.STAGE_BUDGETS["S2"]):
    """Greedy exact-match accuracy and mean per-token loss on (prompt, response) pairs."""
    hits, losses, examples = 0, [], []
    with nx.no_grad():
        for i in range(len(dataset)):
            s = dataset[i]
            emb = model.embed_image(s.image, budget)
            pred = greedy_decode(model, None, s.prompt, max_new_tokens, image_embeds=emb)
            hits += pred == s.response
            seq = model.build_sequence(None, s.prompt, s.response, image_embeds=emb)
            losses.append(float(ar_loss(forward(seq, model), seq).data))
            if len(examples) < 3:
                examples.append({"prediction": pred, "reference": s.response})
    n = len(dataset)
    return {"n": n, "exact_match": hits / n if n else 0.0,
            "token_loss": float(np.mean(losses)) if losses else float("nan"),
            "examples": examples}
