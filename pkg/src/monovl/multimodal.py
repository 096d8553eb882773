"""Images and text to a single token sequence.

Images are cut into 28x28 patches after a bilinear resize chosen to fit a patch
budget, with a fixed 2x2 thumbnail of the whole image appended.  Text goes
through a byte-level tokenizer.  :func:`assemble` lays the pieces out as
``[BOS, IMG_START, visual..., IMG_END, prompt..., response..., EOS]``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, DimensionError, InputError

PATCH = 28
THUMB_GRID = (2, 2)
MAX_PIXELS = 8_000_000
MAX_PATCHES = 10_240
STAGE_BUDGETS = {"S1.1": 1280, "S1.2": 1792, "S1.3": 3328, "S2": 6400}

BOS, EOS, IMG_START, IMG_END, PAD = 256, 257, 258, 259, 260
VOCAB_SIZE = 261
SPECIAL_NAMES = {BOS: "<bos>", EOS: "<eos>", IMG_START: "<img>", IMG_END: "</img>",
                 PAD: "<pad>"}


class Modality(enum.IntEnum):
    TEXTUAL = 0
    VISUAL = 1


# -- images -----------------------------------------------------------------------

@dataclass
class Image:
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = check_image(self.pixels)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


def check_image(pixels):
    """Validate an H x W x 3 array of finite values in [0, 1]."""
    if isinstance(pixels, Image):
        return pixels.pixels
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError(f"image must be H x W x 3, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InputError(f"degenerate image of shape {arr.shape}")
    if arr.shape[0] * arr.shape[1] > MAX_PIXELS:
        raise InputError(f"image has {arr.shape[0] * arr.shape[1]:,} pixels; "
                         f"the ceiling is {MAX_PIXELS:,}")
    if arr.dtype.kind not in "f":
        arr = arr.astype(np.float64)
    if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
        raise InputError("pixel values must be finite and within [0, 1]")
    return arr


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int
    patch_side: int = PATCH
    includes_thumbnail: bool = True
    thumbnail_rows: int = THUMB_GRID[0]
    thumbnail_cols: int = THUMB_GRID[1]
    thumbnail_first: bool = False

    @property
    def n_content(self):
        return self.rows * self.cols

    @property
    def n_thumbnail(self):
        return self.thumbnail_rows * self.thumbnail_cols if self.includes_thumbnail else 0

    @property
    def n_patches(self):
        return self.n_content + self.n_thumbnail


def _round_half_up(v):
    return int(math.floor(v + 0.5))


def choose_grid(height, width, budget, thumbnail=True):
    """Content patch grid (rows, cols) for an image under a patch budget.

    The native grid (each side rounded to a multiple of 28, at least one patch)
    is kept when it fits.  Otherwise the largest grid whose cell count fits,
    whose sides do not exceed the native ones and whose aspect ratio stays within
    one patch row/column of the image's, wins; ties go to the closer aspect.
    """
    if height < 1 or width < 1:
        raise InputError(f"degenerate image size {height}x{width}")
    n_thumb = THUMB_GRID[0] * THUMB_GRID[1] if thumbnail else 0
    if budget < n_thumb + 1:
        raise InputError(f"patch budget {budget} leaves no room for content patches")
    cap = min(budget - n_thumb, MAX_PATCHES, MAX_PIXELS // (PATCH * PATCH))
    h0 = max(1, _round_half_up(height / PATCH))
    w0 = max(1, _round_half_up(width / PATCH))
    if h0 * w0 <= cap:
        return h0, w0
    aspect = width / height
    best = None
    for h in range(1, min(h0, cap) + 1):
        ideal = h * aspect
        for w in {math.floor(ideal), math.ceil(ideal)}:
            if 1 <= w <= w0 and h * w <= cap:
                key = (h * w, -abs(w / h - aspect), h)
                best = max(best, key + (w,)) if best else key + (w,)
    for w in range(1, min(w0, cap) + 1):
        ideal = w / aspect
        for h in {math.floor(ideal), math.ceil(ideal)}:
            if 1 <= h <= h0 and h * w <= cap:
                key = (h * w, -abs(w / h - aspect), h)
                best = max(best, key + (w,)) if best else key + (w,)
    if best is None:
        # aspect more extreme than the cap allows: a single strip
        return (1, min(w0, cap)) if aspect >= 1 else (min(h0, cap), 1)
    return best[2], best[3]


def _axis_weights(n_out, n_in):
    """Half-pixel bilinear sampling positions along one axis."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def resize_bilinear(pixels, out_h, out_w):
    pixels = np.asarray(pixels)
    if pixels.shape[:2] == (out_h, out_w):
        return pixels.copy()
    y0, y1, fy = _axis_weights(out_h, pixels.shape[0])
    x0, x1, fx = _axis_weights(out_w, pixels.shape[1])
    fy = fy[:, None, None]
    rows = pixels[y0] * (1 - fy) + pixels[y1] * fy
    fx = fx[None, :, None]
    return rows[:, x0] * (1 - fx) + rows[:, x1] * fx


def bilinear_matrix(n_out, n_in):
    """Dense [n_out, n_in] matrix of the same half-pixel bilinear map."""
    i0, i1, f = _axis_weights(n_out, n_in)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1 - f)
    np.add.at(m, (np.arange(n_out), i1), f)
    return m


def _cut(pixels, rows, cols):
    c = pixels.shape[2]
    p = pixels.reshape(rows, PATCH, cols, PATCH, c).transpose(0, 2, 1, 3, 4)
    return p.reshape(rows * cols, PATCH * PATCH * c)


def patchify(image, budget, thumbnail=True, thumbnail_first=False):
    """Resize, cut into 28x28 patches and append the 2x2 thumbnail.

    Returns ``(patches, grid)`` with patches of shape [n, 28*28*3].
    """
    pixels = check_image(image)
    rows, cols = choose_grid(pixels.shape[0], pixels.shape[1], budget, thumbnail)
    resized = resize_bilinear(pixels, rows * PATCH, cols * PATCH)
    parts = [_cut(resized, rows, cols)]
    if thumbnail:
        th, tw = THUMB_GRID
        thumb = _cut(resize_bilinear(pixels, th * PATCH, tw * PATCH), th, tw)
        parts.insert(0 if thumbnail_first else 1, thumb)
    grid = PatchGrid(rows, cols, includes_thumbnail=thumbnail, thumbnail_first=thumbnail_first)
    return np.concatenate(parts, axis=0), grid


# -- patch embedding -----------------------------------------------------------------

def interpolate_pe(pe, pe_grid, grid_hw):
    """Bilinearly resample a learnable [R*C, d] table onto an h x w grid."""
    pe = nx.constant(pe)
    R, C = pe_grid
    h, w = grid_hw
    if h > R or w > C:
        raise ConfigError(f"grid {h}x{w} exceeds the positional table {R}x{C}")
    if pe.shape[0] != R * C:
        raise DimensionError(f"positional table has {pe.shape[0]} rows, expected {R * C}")
    if (h, w) == (R, C):
        return pe
    my, mx = bilinear_matrix(h, R), bilinear_matrix(w, C)
    d = pe.shape[1]
    # rows first, then columns: [h, R] @ [R, C*d] -> [h, C, d]; [w, C] @ [h, C, d] -> [h, w, d]
    tmp = (my @ pe.data.reshape(R, C * d)).reshape(h, C, d)
    out = np.matmul(mx, tmp).reshape(h * w, d).astype(pe.dtype)

    def backward(g):
        gc = np.matmul(mx.T, g.reshape(h, w, d))
        return ((my.T @ gc.reshape(h, C * d)).reshape(R * C, d).astype(pe.dtype),)

    return nx.make_op(out, "interpolate_pe", (pe,), backward)


@dataclass
class VisualEmbedder:
    """Patch projection, positional table and 2-layer projector."""

    patch_weight: nx.Tensor
    patch_bias: nx.Tensor
    pe: nx.Tensor
    pe_grid: tuple
    fc1_weight: nx.Tensor
    fc1_bias: nx.Tensor
    fc2_weight: nx.Tensor
    fc2_bias: nx.Tensor
    activation: str = "silu"


def patch_features(patches, grid, emb):
    """PatchEmbed(I) + PE, before the projector."""
    patches = nx.constant(np.asarray(patches, dtype=emb.patch_weight.dtype))
    x = nx.add_bias(nx.matmul(patches, emb.patch_weight), emb.patch_bias)
    pe_content = interpolate_pe(emb.pe, emb.pe_grid, (grid.rows, grid.cols))
    segments = [pe_content]
    if grid.includes_thumbnail:
        pe_thumb = interpolate_pe(emb.pe, emb.pe_grid, (grid.thumbnail_rows, grid.thumbnail_cols))
        segments.insert(0 if grid.thumbnail_first else 1, pe_thumb)
    pe = segments[0] if len(segments) == 1 else nx.concat_rows(segments)
    if pe.shape[0] != x.shape[0]:
        raise DimensionError(f"{x.shape[0]} patches but grid implies {pe.shape[0]}")
    return nx.add(x, pe)


def embed_patches(patches, grid, emb):
    """MLP(PatchEmbed(I) + PE): visual tokens at model width."""
    h = patch_features(patches, grid, emb)
    h = nx.add_bias(nx.matmul(h, emb.fc1_weight), emb.fc1_bias)
    if emb.activation == "silu":
        h = nx.silu(h)
    elif emb.activation != "identity":
        raise ConfigError(f"unknown projector activation {emb.activation!r}")
    return nx.add_bias(nx.matmul(h, emb.fc2_weight), emb.fc2_bias)


# -- text -------------------------------------------------------------------------------

def encode(text):
    """UTF-8 byte ids, no specials."""
    return list(text.encode("utf-8"))


def tokenize(text):
    return [BOS] + encode(text) + [EOS]


def detokenize(ids):
    """Bytes back to text; special ids are dropped."""
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


# -- sequence assembly -------------------------------------------------------------------

@dataclass
class MultimodalSequence:
    modality: np.ndarray
    loss_mask: np.ndarray
    positions: np.ndarray
    token_ids: np.ndarray
    embeddings: nx.Tensor | None = None
    n_images: int = 0
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.modality)

    @property
    def is_visual(self):
        return self.modality

    def with_mask(self, mask):
        """Same embeddings and ids under a different modality mask."""
        from .dispatch import as_mask

        return MultimodalSequence(as_mask(mask, len(self)), self.loss_mask, self.positions,
                                  self.token_ids, self.embeddings, self.n_images)

    def validate(self):
        if np.any(self.loss_mask & self.modality):
            raise InputError("loss_mask covers a visual position")
        starts = np.flatnonzero(np.diff(np.concatenate([[0], self.modality.astype(np.int8)])) == 1)
        if len(starts) != self.n_images:
            raise InputError(f"{len(starts)} visual runs for {self.n_images} image(s)")
        if self.embeddings is not None and self.embeddings.shape[0] != len(self):
            raise DimensionError("embedding rows do not match sequence length")
        return self


def assemble(image_embeds, text_ids, response_span, embed_text=None, add_eos=True,
             n_visual=None):
    """Lay out one (image, prompt, response) example.

    ``text_ids`` holds prompt and response bytes; ``response_span`` is the
    half-open range of the response inside it and must run to its end.  Pass
    ``embed_text(ids, positions) -> Tensor`` to build embeddings; without it only
    the layout is produced (``n_visual`` then gives the visual run length).
    """
    text_ids = [int(t) for t in text_ids]
    start, end = response_span
    if not (0 <= start <= end == len(text_ids)):
        raise InputError(f"response span {response_span} must end the {len(text_ids)} text ids")
    if image_embeds is not None:
        n_visual = image_embeds.shape[0]
    n_visual = n_visual or 0
    if n_visual:
        head = [BOS, IMG_START]
        tail = [IMG_END] + text_ids
    else:
        head, tail = [BOS], text_ids
    if add_eos:
        tail = tail + [EOS]
    n = len(head) + n_visual + len(tail)
    modality = np.zeros(n, dtype=bool)
    modality[len(head): len(head) + n_visual] = True
    token_ids = np.array(head + [-1] * n_visual + tail, dtype=np.int64)
    loss_mask = np.zeros(n, dtype=bool)
    offset = len(head) + n_visual + (1 if n_visual else 0)
    loss_mask[offset + start: offset + end] = True
    if add_eos:
        loss_mask[-1] = True
    positions = np.arange(n, dtype=np.int64)
    seq = MultimodalSequence(modality, loss_mask, positions, token_ids,
                             n_images=1 if n_visual else 0)
    if embed_text is not None:
        first = embed_text(np.array(head), positions[: len(head)])
        rest = embed_text(np.array(tail), positions[len(head) + n_visual:])
        parts = [first, image_embeds, rest] if n_visual else [first, rest]
        seq.embeddings = nx.concat_rows([p for p in parts if p.shape[0]])
    return seq.validate()
