"""The monolithic multimodal decoder.

Each layer is pre-norm:

    x' = x + MMHA(RMSNorm(x))
    y  = x' + MMoE(RMSNorm(x'))

MMoE sends every row through the visual or the textual gated-SiLU FFN according
to the static modality mask.  With ``attention_experts`` the Q/K/V projection is
routed the same way; the attention itself is shared across modalities.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from fnmatch import fnmatch

import numpy as np

from . import multimodal as mm
from . import numerics as nx
from .dispatch import (DEFAULT_BLOCK_SIZE, ExpertOpSpec, OpKind, Strategy, as_mask, dispatch,
                       plan_blocks)
from .exceptions import ConfigError, DimensionError, InputError

PATCH_IN = mm.PATCH * mm.PATCH * 3


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_hidden: int = 128
    vocab_size: int = mm.VOCAB_SIZE
    max_context: int = 192
    pe_grid: tuple = (8, 8)
    patch_dim: int | None = None
    attention_experts: bool = True
    route_o_proj: bool = False
    norm_experts: bool = False
    rms_eps: float = 1e-6
    projector_activation: str = "silu"
    init_std: float = 0.02
    dtype: str = "float64"

    def __post_init__(self):
        self.pe_grid = tuple(int(v) for v in self.pe_grid)
        if self.patch_dim is None:
            self.patch_dim = self.d_model
        self.validate()

    def validate(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        for name in ("d_model", "n_heads", "n_layers", "ffn_hidden", "vocab_size", "max_context"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, not {self.dtype!r}")
        if len(self.pe_grid) != 2 or min(self.pe_grid) < 1:
            raise ConfigError(f"pe_grid must be two positive ints, got {self.pe_grid}")
        return self

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    @property
    def attn_scale(self):
        return 1.0 / np.sqrt(self.head_dim)

    @property
    def max_patches(self):
        return self.pe_grid[0] * self.pe_grid[1]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["pe_grid"] = list(self.pe_grid)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ExpertPair:
    """Structurally identical textual and visual parameter sets."""

    name: str
    kind: OpKind
    textual: tuple
    visual: tuple

    def __post_init__(self):
        for t, v in zip(self.textual, self.visual):
            if t.shape != v.shape:
                raise DimensionError(f"{self.name}: expert shapes differ {t.shape} vs {v.shape}")

    def spec(self):
        return ExpertOpSpec(self.kind, tuple(p.data for p in self.visual),
                            tuple(p.data for p in self.textual))

    @property
    def parameters(self):
        return list(self.visual) + list(self.textual)


def _ffn_names(prefix):
    return [f"{prefix}.gate", f"{prefix}.up", f"{prefix}.down"]


class ModelState:
    """Parameter registry plus the settings needed to run a forward pass."""

    def __init__(self, config, seed=0, strategy=Strategy.FUSED_BLOCKED,
                 block_size=DEFAULT_BLOCK_SIZE):
        self.config = config
        self.strategy = Strategy(strategy)
        self.block_size = block_size
        self.params = {}
        self.pairs = []
        self._norm_pairs = []
        self._build(np.random.default_rng(seed))

    # -- construction ------------------------------------------------------------
    def _add(self, name, value):
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        p = nx.Parameter(np.asarray(value, dtype=self.config.dtype), name=name)
        self.params[name] = p
        return p

    def _build(self, rng):
        c = self.config
        std = c.init_std
        resid_std = std / np.sqrt(2 * c.n_layers)
        d, h, dp = c.d_model, c.ffn_hidden, c.patch_dim

        def normal(*shape, s=std):
            return rng.standard_normal(shape) * s

        self._add("patch_embed.weight", normal(PATCH_IN, dp))
        self._add("patch_embed.bias", np.zeros(dp))
        self._add("visual_pe", normal(c.max_patches, dp))
        self._add("projector.fc1.weight", normal(dp, d))
        self._add("projector.fc1.bias", np.zeros(d))
        self._add("projector.fc2.weight", normal(d, d))
        self._add("projector.fc2.bias", np.zeros(d))
        self._add("tok_embed", normal(c.vocab_size, d))
        self._add("pos_embed", normal(c.max_context, d))
        for i in range(c.n_layers):
            pre = f"layers.{i}"
            for norm in ("attn_norm", "ffn_norm"):
                if c.norm_experts:
                    t = self._add(f"{pre}.{norm}.textual.gain", np.ones(d))
                    v = self._add(f"{pre}.{norm}.visual.gain", np.ones(d))
                    self._norm_pairs.append((f"{pre}.{norm}", t, v))
                else:
                    self._add(f"{pre}.{norm}.gain", np.ones(d))
            if c.attention_experts:
                t = self._add(f"{pre}.attn.qkv.textual.weight", normal(d, 3 * d))
                v = self._add(f"{pre}.attn.qkv.visual.weight", normal(d, 3 * d))
                self.pairs.append(ExpertPair(f"{pre}.attn.qkv", OpKind.LINEAR, (t,), (v,)))
            else:
                self._add(f"{pre}.attn.qkv.weight", normal(d, 3 * d))
            if c.attention_experts and c.route_o_proj:
                t = self._add(f"{pre}.attn.o.textual.weight", normal(d, d, s=resid_std))
                v = self._add(f"{pre}.attn.o.visual.weight", normal(d, d, s=resid_std))
                self.pairs.append(ExpertPair(f"{pre}.attn.o", OpKind.LINEAR, (t,), (v,)))
            else:
                self._add(f"{pre}.attn.o.weight", normal(d, d, s=resid_std))
            experts = {}
            for side in ("textual", "visual"):
                g, u, dn = _ffn_names(f"{pre}.ffn.{side}")
                experts[side] = (self._add(g, normal(d, h)), self._add(u, normal(d, h)),
                                 self._add(dn, normal(h, d, s=resid_std)))
            self.pairs.append(ExpertPair(f"{pre}.ffn", OpKind.MLP, experts["textual"],
                                         experts["visual"]))
        self._add("final_norm.gain", np.ones(d))
        self._add("head.weight", normal(d, c.vocab_size))

    # -- registry helpers ---------------------------------------------------------
    def __getitem__(self, name):
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def names(self):
        return list(self.params)

    def select(self, pattern):
        return [p for n, p in self.params.items() if fnmatch(n, pattern)]

    def pair(self, name):
        for p in self.pairs:
            if p.name == name:
                return p
        raise KeyError(name)

    def checksum(self, names=None):
        h = hashlib.sha256()
        for n in names if names is not None else self.params:
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].data).tobytes())
        return h.hexdigest()

    def state_arrays(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_arrays(self, arrays):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ConfigError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for n, v in arrays.items():
            self.params[n].assign(v)

    def copy(self):
        other = ModelState.__new__(ModelState)
        other.__dict__.update(self.__dict__)
        other.config = ModelConfig.from_dict(self.config.to_dict())
        other.params, other.pairs, other._norm_pairs = {}, [], []
        for n, p in self.params.items():
            q = nx.Parameter(p.data, name=n, trainable=p.trainable)
            other.params[n] = q
        for pr in self.pairs:
            other.pairs.append(ExpertPair(pr.name, pr.kind,
                                          tuple(other.params[p.name] for p in pr.textual),
                                          tuple(other.params[p.name] for p in pr.visual)))
        for name, t, v in self._norm_pairs:
            other._norm_pairs.append((name, other.params[t.name], other.params[v.name]))
        return other

    # -- embeddings -------------------------------------------------------------------
    def visual_embedder(self):
        p = self.params
        return mm.VisualEmbedder(p["patch_embed.weight"], p["patch_embed.bias"], p["visual_pe"],
                                 self.config.pe_grid, p["projector.fc1.weight"],
                                 p["projector.fc1.bias"], p["projector.fc2.weight"],
                                 p["projector.fc2.bias"], self.config.projector_activation)

    def embed_patches(self, patches, grid):
        return mm.embed_patches(patches, grid, self.visual_embedder())

    def embed_image(self, image, budget):
        patches, grid = mm.patchify(image, budget)
        return self.embed_patches(patches, grid)

    def embed_text(self, ids, positions):
        ids = np.asarray(ids, dtype=np.int64)
        positions = np.asarray(positions, dtype=np.int64)
        if positions.size and positions.max() >= self.config.max_context:
            raise InputError(f"position {positions.max()} exceeds max_context "
                             f"{self.config.max_context}")
        return nx.add(nx.embedding(self.params["tok_embed"], ids),
                      nx.embedding(self.params["pos_embed"], positions))

    def build_sequence(self, image, prompt, response="", budget=mm.STAGE_BUDGETS["S1.1"],
                       add_eos=True, image_embeds=None):
        """Patchify/embed an image (optional) and lay out prompt + response."""
        if image_embeds is None and image is not None:
            image_embeds = self.embed_image(image, budget)
        p_ids, r_ids = mm.encode(prompt), mm.encode(response)
        ids = p_ids + r_ids
        return mm.assemble(image_embeds, ids, (len(p_ids), len(ids)), self.embed_text,
                           add_eos=add_eos)


# -- routed ops ----------------------------------------------------------------------------

def _routed_backward(x, rows, weights, kind, g):
    xs = x[rows]
    gs = g[rows]
    if kind is OpKind.LINEAR:
        (w,) = weights
        return nx.mm(gs, w.T), (nx.mm(xs.T, gs),)
    wg, wu, wd = weights
    gp = nx.mm(xs, wg)
    up = nx.mm(xs, wu)
    s = nx.sigmoid_array(gp)
    act = gp * s * up
    d_down = nx.mm(act.T, gs)
    da = nx.mm(gs, wd.T)
    dgp = da * up * s * (1.0 + gp * (1.0 - s))
    dup = da * gp * s
    dx = nx.mm(dgp, wg.T) + nx.mm(dup, wu.T)
    return dx, (nx.mm(xs.T, dgp), nx.mm(xs.T, dup), d_down)


def route(x, mask, pair, strategy=Strategy.FUSED_BLOCKED, block_size=DEFAULT_BLOCK_SIZE,
          plan=None):
    """Apply ``pair.visual`` to visual rows and ``pair.textual`` to the rest."""
    x = nx.constant(x)
    mask = as_mask(mask)
    if mask.shape[0] != x.shape[0]:
        raise InputError(f"mask length {mask.shape[0]} != {x.shape[0]} rows")
    out = dispatch(x.data, mask, pair.spec(), strategy, block_size, plan=plan)
    vis_rows = np.flatnonzero(mask)
    txt_rows = np.flatnonzero(~mask)

    def backward(g):
        dx = np.zeros_like(x.data)
        grads = []
        for rows, params in ((vis_rows, pair.visual), (txt_rows, pair.textual)):
            if rows.size == 0:
                grads.extend([None] * len(params))
                continue
            dxs, dws = _routed_backward(x.data, rows, [p.data for p in params], pair.kind, g)
            dx[rows] = dxs
            grads.extend(dws)
        return (dx, *grads)

    return nx.make_op(out, "route", (x, *pair.visual, *pair.textual), backward)


def routed_gain(mask, visual_gain, textual_gain):
    """Per-row gain matrix picking the visual or textual vector."""
    mask = as_mask(mask)
    out = np.where(mask[:, None], visual_gain.data[None, :], textual_gain.data[None, :])

    def backward(g):
        return g[mask].sum(axis=0), g[~mask].sum(axis=0)

    return nx.make_op(out, "routed_gain", (visual_gain, textual_gain), backward)


def _norm(model, x, mask, name):
    c = model.config
    if not c.norm_experts:
        return nx.rmsnorm(x, model.params[f"{name}.gain"], c.rms_eps)
    ones = np.ones(x.shape[1], dtype=x.dtype)
    unit = nx.rmsnorm(x, ones, c.rms_eps)
    gain = routed_gain(mask, model.params[f"{name}.visual.gain"],
                       model.params[f"{name}.textual.gain"])
    return nx.mul(unit, gain)


def _route_kwargs(model, strategy, plan):
    return dict(strategy=strategy or model.strategy, block_size=model.block_size, plan=plan)


def mmha(x, mask, model, layer, strategy=None, plan=None):
    """Causal multi-head attention with (optionally) modality-routed Q/K/V."""
    c = model.config
    pre = f"layers.{layer}.attn"
    kw = _route_kwargs(model, strategy, plan)
    if c.attention_experts:
        qkv = route(x, mask, model.pair(f"{pre}.qkv"), **kw)
    else:
        qkv = nx.matmul(x, model.params[f"{pre}.qkv.weight"])
    att = nx.causal_attention(qkv, c.n_heads, c.attn_scale)
    if c.attention_experts and c.route_o_proj:
        return route(att, mask, model.pair(f"{pre}.o"), **kw)
    return nx.matmul(att, model.params[f"{pre}.o.weight"])


def decoder_layer(x, mask, model, layer, strategy=None, plan=None):
    pre = f"layers.{layer}"
    h = _norm(model, x, mask, f"{pre}.attn_norm")
    x = nx.add(x, mmha(h, mask, model, layer, strategy, plan))
    h = _norm(model, x, mask, f"{pre}.ffn_norm")
    f = route(h, mask, model.pair(f"{pre}.ffn"), **_route_kwargs(model, strategy, plan))
    return nx.add(x, f)


def forward(seq, model, strategy=None, return_hidden=False, last_only=False):
    """Next-token logits [n, vocab] for every position of ``seq``.

    ``last_only`` applies the head to the final position alone ([1, vocab]),
    which is all greedy decoding needs.
    """
    if seq.embeddings is None:
        raise InputError("sequence has no embeddings")
    n = len(seq)
    if n > model.config.max_context:
        raise InputError(f"sequence of {n} tokens exceeds max_context {model.config.max_context}")
    mask = seq.modality
    strategy = Strategy(strategy or model.strategy)
    plan = plan_blocks(mask, model.block_size) if strategy is Strategy.FUSED_BLOCKED else None
    x = seq.embeddings
    for layer in range(model.config.n_layers):
        x = decoder_layer(x, mask, model, layer, strategy, plan)
    h = nx.take_rows(x, [n - 1]) if last_only else x
    h = nx.rmsnorm(h, model.params["final_norm.gain"], model.config.rms_eps)
    logits = nx.matmul(h, model.params["head.weight"])
    return (logits, x) if return_hidden else logits


def init_visual_from_textual(model):
    """Copy every textual expert into its visual twin, bit for bit."""
    for pair in model.pairs:
        for t, v in zip(pair.textual, pair.visual):
            v.data[...] = t.data
    for _, t, v in model._norm_pairs:
        v.data[...] = t.data
    return model


def expert_pairs_identical(model):
    ok = all(np.array_equal(t.data, v.data) for pr in model.pairs
             for t, v in zip(pr.textual, pr.visual))
    return ok and all(np.array_equal(t.data, v.data) for _, t, v in model._norm_pairs)


# -- parameter bookkeeping ---------------------------------------------------------------------

VISUAL_FRONTEND = ("patch_embed.*", "visual_pe", "projector.*")


def parameter_group(name):
    """'visual_frontend', 'visual_expert', 'textual_expert' or 'shared'."""
    if any(fnmatch(name, p) for p in VISUAL_FRONTEND):
        return "visual_frontend"
    if ".visual." in name:
        return "visual_expert"
    if ".textual." in name:
        return "textual_expert"
    return "shared"


def count_parameters(model):
    counts = {"visual_frontend": 0, "visual_expert": 0, "textual_expert": 0, "shared": 0}
    for n, p in model.params.items():
        counts[parameter_group(n)] += p.data.size
    counts["total"] = sum(counts.values())
    counts["visual_expert_share"] = counts["visual_expert"] / counts["total"]
    return counts


def config_json(config):
    return json.dumps(config.to_dict(), sort_keys=True)


def greedy_decode(model, image, prompt, max_new_tokens=96, budget=mm.STAGE_BUDGETS["S2"],
                  image_embeds=None):
    """Greedy continuation of ``prompt``; returns the generated text.

    Each step re-runs the full prefix (no key/value cache).
    """
    with nx.no_grad():
        if image_embeds is None and image is not None:
            image_embeds = model.embed_image(image, budget)
        p_ids = mm.encode(prompt)
        out = []
        for _ in range(max_new_tokens):
            ids = p_ids + out
            seq = mm.assemble(image_embeds, ids, (len(ids), len(ids)), model.embed_text,
                              add_eos=False)
            if len(seq) >= model.config.max_context:
                break
            nxt = int(np.argmax(forward(seq, model, last_only=True).data[-1]))
            if nxt == mm.EOS or nxt >= 256:
                break
            out.append(nxt)
    return mm.detokenize(out)
