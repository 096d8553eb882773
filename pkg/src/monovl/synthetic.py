"""Shapes-and-captions corpus and its on-disk shard format.

Each image is a 56x56 black canvas cut into 2x2 cells of 28 px.  One to four
cells hold a red, green or blue circle, square or triangle.  The caption lists
the shapes in row-major cell order, e.g. ``"a red circle and a blue square"``,
and is computed from the drawing spec alone.

Shard layout (little-endian)::

    b"MVLSHARD"  u32 version  u32 n_records
    per record:
        u32 height  u32 width  u32 caption_len  u32 spec_len
        uint8[height*width*3] pixels (HWC, row-major)
        caption_len bytes of UTF-8 caption
        spec_len bytes of UTF-8 JSON spec

``manifest.json`` next to the shards lists each file with its sha256.
"""

import hashlib
import json
import os
import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .exceptions import ChecksumError, InputError

COLORS = {"red": (1.0, 0.0, 0.0), "green": (0.0, 0.8, 0.0), "blue": (0.0, 0.0, 1.0)}
SHAPES = ("circle", "square", "triangle")
CELL = 28
GRID = 2
CANVAS = CELL * GRID
NUMBERS = ("one", "two", "three", "four")
TASKS = ("concept", "semantic", "alignment", "instruction")
CAPTION_PROMPT = "caption: "

SHARD_MAGIC = b"MVLSHARD"
SHARD_VERSION = 1
_HEADER = struct.Struct("<8sII")
_RECORD = struct.Struct("<IIII")


@dataclass
class Sample:
    image: np.ndarray
    prompt: str
    response: str
    caption: str
    spec: dict


def gen_spec(seed, index):
    rng = np.random.default_rng([seed, index])
    k = int(rng.integers(1, GRID * GRID + 1))
    cells = np.sort(rng.choice(GRID * GRID, size=k, replace=False))
    shapes = []
    for c in cells:
        shapes.append({"cell": int(c),
                       "color": str(rng.choice(list(COLORS))),
                       "shape": str(rng.choice(SHAPES)),
                       "size": int(rng.integers(8, 12)),
                       "dy": int(rng.integers(-2, 3)),
                       "dx": int(rng.integers(-2, 3))})
    return {"seed": int(seed), "index": int(index), "shapes": shapes}


def render(spec):
    img = np.zeros((CANVAS, CANVAS, 3))
    yy, xx = np.mgrid[0:CANVAS, 0:CANVAS] + 0.5
    for s in spec["shapes"]:
        r, c = divmod(s["cell"], GRID)
        cy = r * CELL + CELL / 2 + s["dy"]
        cx = c * CELL + CELL / 2 + s["dx"]
        h = s["size"]
        if s["shape"] == "circle":
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= h * h
        elif s["shape"] == "square":
            inside = (np.abs(yy - cy) <= h * 0.85) & (np.abs(xx - cx) <= h * 0.85)
        else:
            top, bottom = cy - h, cy + h
            frac = (yy - top) / (bottom - top)
            inside = (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * h)
        img[inside] = COLORS[s["color"]]
    return img


def caption_of(spec):
    return " and ".join(f"a {s['color']} {s['shape']}" for s in spec["shapes"])


def parse_caption(caption):
    """Multiset of (color, shape) pairs named by a caption."""
    out = Counter()
    for part in caption.split(" and "):
        words = part.split()
        if len(words) != 3 or words[0] != "a" or words[1] not in COLORS or words[2] not in SHAPES:
            raise InputError(f"not a shape phrase: {part!r}")
        out[(words[1], words[2])] += 1
    return out


def task_pair(task, spec, index):
    """(prompt, response) for one sample under a training task."""
    caption = caption_of(spec)
    count = NUMBERS[len(spec["shapes"]) - 1]
    describe = ("describe: ", f"{caption}, {count} shape{'s' if count != 'one' else ''}")
    pairs = {"caption": (CAPTION_PROMPT, caption), "count": ("count: ", count),
             "describe": describe}
    if task == "concept":
        return pairs["caption"]
    if task == "semantic":
        return describe
    if task == "alignment":
        return pairs["caption"] if index % 2 == 0 else pairs["count"]
    if task == "instruction":
        return pairs[("caption", "count", "describe")[index % 3]]
    raise InputError(f"unknown task {task!r}; expected one of {TASKS}")


def gen_sample(seed, index, task="concept"):
    spec = gen_spec(seed, index)
    prompt, response = task_pair(task, spec, index)
    return Sample(render(spec), prompt, response, caption_of(spec), spec)


def gen_synthetic(seed, n_samples, task="concept", start=0):
    return [gen_sample(seed, i, task) for i in range(start, start + n_samples)]


class SyntheticDataset:
    """Lazily generated samples ``start .. start+n-1`` of one seed."""

    def __init__(self, seed, n_samples, task="concept", start=0):
        if task not in TASKS:
            raise InputError(f"unknown task {task!r}; expected one of {TASKS}")
        self.seed, self.n, self.task, self.start = seed, n_samples, task, start
        self._cache = {}

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        if not 0 <= i < self.n:
            raise IndexError(i)
        if i not in self._cache:
            self._cache[i] = gen_sample(self.seed, self.start + i, self.task)
        return self._cache[i]

    def __iter__(self):
        return (self[i] for i in range(self.n))


class ListDataset:
    def __init__(self, samples):
        self.samples = list(samples)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)


# -- shards ---------------------------------------------------------------------------------

def encode_record(sample):
    pix = np.clip(np.rint(np.asarray(sample.image) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = pix.shape
    cap = sample.caption.encode()
    spec = json.dumps(sample.spec, sort_keys=True).encode()
    return _RECORD.pack(h, w, len(cap), len(spec)) + pix.tobytes() + cap + spec


def write_shard(samples, path):
    samples = list(samples)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, len(samples)))
        for s in samples:
            f.write(encode_record(s))
    return path


def read_shard(path, task="concept"):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _HEADER.size:
        raise InputError(f"{path}: truncated shard header")
    magic, version, n = _HEADER.unpack_from(buf, 0)
    if magic != SHARD_MAGIC or version != SHARD_VERSION:
        raise InputError(f"{path}: not a version-{SHARD_VERSION} shard")
    off = _HEADER.size
    out = []
    for _ in range(n):
        h, w, nc, ns = _RECORD.unpack_from(buf, off)
        off += _RECORD.size
        npx = h * w * 3
        pix = np.frombuffer(buf, np.uint8, npx, off).reshape(h, w, 3)
        off += npx
        caption = buf[off: off + nc].decode()
        off += nc
        spec = json.loads(buf[off: off + ns].decode())
        off += ns
        prompt, response = task_pair(task, spec, spec["index"])
        out.append(Sample(pix.astype(np.float64) / 255.0, prompt, response, caption, spec))
    if off != len(buf):
        raise InputError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_shards(samples, out_dir, shard_size=256, prefix="shard"):
    os.makedirs(out_dir, exist_ok=True)
    samples = list(samples)
    entries = []
    for k, i in enumerate(range(0, max(len(samples), 1), shard_size)):
        name = f"{prefix}-{k:05d}.bin"
        path = os.path.join(out_dir, name)
        write_shard(samples[i: i + shard_size], path)
        entries.append({"file": name, "records": len(samples[i: i + shard_size]),
                        "sha256": sha256_file(path)})
    manifest = {"format": "MVLSHARD", "version": SHARD_VERSION, "shards": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def read_shards(out_dir, task="concept"):
    with open(os.path.join(out_dir, "manifest.json")) as f:
        manifest = json.load(f)
    samples = []
    for e in manifest["shards"]:
        path = os.path.join(out_dir, e["file"])
        if sha256_file(path) != e["sha256"]:
            raise ChecksumError(f"{e['file']}: sha256 mismatch", blob=e["file"])
        samples.extend(read_shard(path, task))
    return ListDataset(samples)
